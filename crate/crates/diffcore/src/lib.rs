//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The op set is deliberately small: dense (affine) layers, the elementwise
//! nonlinearities used by the surrogate networks, concat/slice along the
//! feature axis, full reductions, linear combinations (for unrolled ODE
//! steps) and sampling with externally fixed noise. Everything is recorded
//! on a [`Tape`]; [`DiffValue::backward`] replays it in reverse topological
//! order.
//!
//! Computation is `f64` throughout so gradients can be validated against
//! central finite differences at tight tolerances.

mod adam;
mod checkpoint;
mod mlp;
mod tape;
mod tensor;

pub mod gradcheck;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use mlp::{Activation, BoundMlp, Mlp};
pub use tape::{DiffValue, Tape};
pub use tensor::Tensor;

/// Errors surfaced by the public API entry points.
#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a scalar, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
    #[error("checkpoint I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;
