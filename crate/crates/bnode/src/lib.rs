//! Reduced-order surrogate modeling of dynamical systems with Balanced
//! Neural ODEs: a VAE whose latent variational parameters (μ, σ) are
//! propagated through time by a neural (or linear) ODE, balancing state
//! reduction against reconstruction quality via β.
//!
//! The crate bundles everything needed to exercise the method end to end:
//! ODE integrators usable both for ground-truth simulation and inside
//! differentiable training ([`odeint`]), two first-principles benchmark
//! systems ([`physics`]), dataset generation and persistence ([`dataset`]),
//! the model family with its ELBO loss and latent diagnostics
//! ([`surrogate`]), multi-phase growing-horizon training ([`trainer`]) and
//! classical linear comparisons ([`baselines`]).

pub mod baselines;
pub mod dataset;
pub mod odeint;
pub mod physics;
pub mod surrogate;
pub mod trainer;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("linear algebra failed: {0}")]
    Linalg(String),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
