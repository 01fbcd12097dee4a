use std::cell::RefCell;
use std::rc::Rc;

use rayon::prelude::*;

use crate::tensor::Tensor;
use crate::{DiffError, Result};

// Row count × in × out above which dense layers fan out to the rayon pool.
// Each output row is produced by exactly one task with a fixed-order inner
// loop, so results are bit-identical to the serial path.
const PAR_FLOP_THRESHOLD: usize = 1 << 15;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// a * x + b, elementwise with scalar coefficients.
    Affine { x: usize, a: f64 },
    AddTensor { x: usize },
    MulTensor { x: usize, c: Tensor },
    /// y = x · wᵀ + b with x: [n, in] (or [in]), w: [out, in], b: [out].
    Linear { x: usize, w: usize, b: usize },
    Elu(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Square(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Concat { parts: Vec<usize> },
    SliceCols { x: usize, start: usize },
    Sum(usize),
    Mean(usize),
    LinComb { terms: Vec<(f64, usize)> },
}

struct Node {
    data: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Computation tape. Append-only: node inputs always have smaller ids, so
/// reverse id order is reverse topological order for the backward pass.
/// Single-threaded per tape; independent tapes may run concurrently.
#[derive(Clone)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape(Rc::new(RefCell::new(TapeInner::default())))
    }

    pub fn num_nodes(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    /// Record a tracked input. Parameters and constants alike enter the tape
    /// this way; gradients of constants are simply never read.
    pub fn leaf(&self, data: Tensor) -> DiffValue {
        self.push(data, Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> DiffValue {
        self.leaf(Tensor::zeros(shape))
    }

    /// Concatenate along the last axis. All parts must share rank and
    /// leading dimensions.
    pub fn concat(&self, parts: &[&DiffValue]) -> DiffValue {
        assert!(!parts.is_empty(), "concat of zero parts");
        let first = &parts[0].shape;
        let rank = first.len();
        assert!(rank >= 1, "concat needs rank >= 1");
        let lead = &first[..rank - 1];
        let mut total_cols = 0;
        for p in parts {
            assert_eq!(p.shape.len(), rank, "concat rank mismatch: {:?} vs {:?}", first, p.shape);
            assert_eq!(&p.shape[..rank - 1], lead, "concat leading dims: {:?} vs {:?}", first, p.shape);
            total_cols += p.shape[rank - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.push(total_cols);
        let mut out = vec![0.0; rows * total_cols];
        {
            let inner = self.0.borrow();
            let mut col_off = 0;
            for p in parts {
                let cols = p.shape[rank - 1];
                let src = inner.nodes[p.id].data.data();
                for r in 0..rows {
                    out[r * total_cols + col_off..r * total_cols + col_off + cols]
                        .copy_from_slice(&src[r * cols..(r + 1) * cols]);
                }
                col_off += cols;
            }
        }
        self.push(
            Tensor::new(out, &out_shape),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        )
    }

    /// Σ cᵢ·xᵢ over same-shape values; the workhorse of unrolled ODE steps.
    pub fn lin_comb(&self, terms: &[(f64, &DiffValue)]) -> DiffValue {
        assert!(!terms.is_empty(), "lin_comb of zero terms");
        let shape = terms[0].1.shape.clone();
        for (_, v) in terms {
            assert_eq!(v.shape, shape, "lin_comb shape mismatch");
        }
        let mut out = vec![0.0; shape.iter().product()];
        {
            let inner = self.0.borrow();
            for (c, v) in terms {
                let src = inner.nodes[v.id].data.data();
                for (o, s) in out.iter_mut().zip(src) {
                    *o += c * s;
                }
            }
        }
        self.push(
            Tensor::new(out, &shape),
            Op::LinComb {
                terms: terms.iter().map(|(c, v)| (*c, v.id)).collect(),
            },
        )
    }

    fn push(&self, data: Tensor, op: Op) -> DiffValue {
        let shape = data.shape().to_vec();
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { data, grad: None, op });
        DiffValue {
            tape: Tape(self.0.clone()),
            id,
            shape,
        }
    }
}

/// Handle to one node of a [`Tape`]: dense data plus (after a backward pass)
/// a same-shape gradient accumulator.
#[derive(Clone)]
pub struct DiffValue {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

impl std::fmt::Debug for DiffValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffValue")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

impl DiffValue {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Snapshot of the node's data.
    pub fn data(&self) -> Tensor {
        self.tape.0.borrow().nodes[self.id].data.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.0.borrow().nodes[self.id].data.item()
    }

    pub fn all_finite(&self) -> bool {
        self.tape.0.borrow().nodes[self.id].data.all_finite()
    }

    /// Accumulated gradient; zeros when the node was not reached by the
    /// latest backward pass.
    pub fn grad(&self) -> Tensor {
        let inner = self.tape.0.borrow();
        match &inner.nodes[self.id].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shape),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn same_tape(&self, other: &DiffValue) {
        assert!(
            Rc::ptr_eq(&self.tape.0, &other.tape.0),
            "operands live on different tapes"
        );
    }

    fn binary(&self, other: &DiffValue, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> DiffValue {
        self.same_tape(other);
        assert_eq!(
            self.shape, other.shape,
            "{op_name} shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        let out = {
            let inner = self.tape.0.borrow();
            let a = inner.nodes[self.id].data.data();
            let b = inner.nodes[other.id].data.data();
            a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>()
        };
        self.tape.push(Tensor::new(out, &self.shape), op)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> DiffValue {
        let out = {
            let inner = self.tape.0.borrow();
            inner.nodes[self.id].data.data().iter().map(|x| f(*x)).collect::<Vec<_>>()
        };
        self.tape.push(Tensor::new(out, &self.shape), op)
    }

    pub fn add(&self, other: &DiffValue) -> DiffValue {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &DiffValue) -> DiffValue {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &DiffValue) -> DiffValue {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// a·x + b elementwise, scalar coefficients.
    pub fn affine(&self, a: f64, b: f64) -> DiffValue {
        self.unary(|x| a * x + b, Op::Affine { x: self.id, a })
    }

    /// x + c with a fixed (non-differentiated) tensor, e.g. a data target.
    pub fn add_tensor(&self, c: &Tensor) -> DiffValue {
        assert_eq!(self.shape, c.shape(), "add_tensor shape mismatch");
        let out = {
            let inner = self.tape.0.borrow();
            inner.nodes[self.id]
                .data
                .data()
                .iter()
                .zip(c.data())
                .map(|(x, y)| x + y)
                .collect::<Vec<_>>()
        };
        self.tape.push(Tensor::new(out, &self.shape), Op::AddTensor { x: self.id })
    }

    /// x ⊙ c with a fixed tensor, e.g. sampling noise ε.
    pub fn mul_tensor(&self, c: &Tensor) -> DiffValue {
        assert_eq!(self.shape, c.shape(), "mul_tensor shape mismatch");
        let out = {
            let inner = self.tape.0.borrow();
            inner.nodes[self.id]
                .data
                .data()
                .iter()
                .zip(c.data())
                .map(|(x, y)| x * y)
                .collect::<Vec<_>>()
        };
        self.tape.push(
            Tensor::new(out, &self.shape),
            Op::MulTensor {
                x: self.id,
                c: c.clone(),
            },
        )
    }

    pub fn elu(&self) -> DiffValue {
        self.unary(|x| if x > 0.0 { x } else { x.exp() - 1.0 }, Op::Elu(self.id))
    }

    pub fn relu(&self) -> DiffValue {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn exp(&self) -> DiffValue {
        self.unary(|x| x.exp(), Op::Exp(self.id))
    }

    pub fn ln(&self) -> DiffValue {
        self.unary(|x| x.ln(), Op::Ln(self.id))
    }

    pub fn softplus(&self) -> DiffValue {
        self.unary(
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Op::Softplus(self.id),
        )
    }

    pub fn square(&self) -> DiffValue {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> DiffValue {
        assert!(lo <= hi, "clamp bounds inverted: [{lo}, {hi}]");
        self.unary(|x| x.clamp(lo, hi), Op::Clamp { x: self.id, lo, hi })
    }

    /// Columns `[start, start+len)` along the last axis.
    pub fn slice_cols(&self, start: usize, len: usize) -> DiffValue {
        let rank = self.shape.len();
        assert!(rank >= 1, "slice_cols needs rank >= 1");
        let cols = self.shape[rank - 1];
        assert!(
            start + len <= cols,
            "slice_cols [{start}, {}) out of {cols} columns",
            start + len
        );
        let rows: usize = self.shape[..rank - 1].iter().product();
        let mut out_shape = self.shape[..rank - 1].to_vec();
        out_shape.push(len);
        let mut out = vec![0.0; rows * len];
        {
            let inner = self.tape.0.borrow();
            let src = inner.nodes[self.id].data.data();
            for r in 0..rows {
                out[r * len..(r + 1) * len].copy_from_slice(&src[r * cols + start..r * cols + start + len]);
            }
        }
        self.tape.push(
            Tensor::new(out, &out_shape),
            Op::SliceCols { x: self.id, start },
        )
    }

    pub fn sum(&self) -> DiffValue {
        let s = {
            let inner = self.tape.0.borrow();
            inner.nodes[self.id].data.data().iter().sum::<f64>()
        };
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> DiffValue {
        assert!(self.numel() > 0, "mean of empty tensor");
        let s = {
            let inner = self.tape.0.borrow();
            inner.nodes[self.id].data.data().iter().sum::<f64>() / self.numel() as f64
        };
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Dense affine layer: `x · wᵀ + b` with `w: [out, in]`, `b: [out]`.
    /// `x` may be `[n, in]` or a single row `[in]`.
    pub fn linear(&self, w: &DiffValue, b: &DiffValue) -> DiffValue {
        self.same_tape(w);
        self.same_tape(b);
        assert_eq!(w.shape.len(), 2, "weight must be rank 2, got {:?}", w.shape);
        let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
        assert_eq!(b.shape, vec![out_dim], "bias shape {:?} vs out {}", b.shape, out_dim);
        let (rows, x_cols, batched) = match self.shape.len() {
            1 => (1, self.shape[0], false),
            2 => (self.shape[0], self.shape[1], true),
            _ => panic!("linear input must be rank 1 or 2, got {:?}", self.shape),
        };
        assert_eq!(
            x_cols, in_dim,
            "linear input width {} vs weight in-dim {}",
            x_cols, in_dim
        );
        let out = {
            let inner = self.tape.0.borrow();
            let x = inner.nodes[self.id].data.data();
            let wd = inner.nodes[w.id].data.data();
            let bd = inner.nodes[b.id].data.data();
            linear_forward(x, wd, bd, rows, in_dim, out_dim)
        };
        let out_shape = if batched { vec![rows, out_dim] } else { vec![out_dim] };
        self.tape.push(
            Tensor::new(out, &out_shape),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        )
    }

    /// Reverse pass from a scalar loss. Every parameter reachable from the
    /// loss gets its gradient populated; unreachable nodes keep zero grad.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.0.borrow_mut();
        if inner.nodes[self.id].data.numel() != 1 {
            return Err(DiffError::NonScalar {
                op: "backward",
                shape: self.shape.clone(),
            });
        }
        for node in inner.nodes.iter_mut() {
            node.grad = None;
        }
        let seed_shape = inner.nodes[self.id].data.shape().to_vec();
        inner.nodes[self.id].grad = Some(Tensor::full(&seed_shape, 1.0));

        for id in (0..=self.id).rev() {
            let (before, rest) = inner.nodes.split_at_mut(id);
            let node = &mut rest[0];
            let Some(up) = node.grad.take() else { continue };
            apply_backward(&node.op, &node.data, &up, before);
            // Leaf grads stay readable after the pass.
            node.grad = Some(up);
        }
        Ok(())
    }
}

fn linear_forward(x: &[f64], w: &[f64], b: &[f64], rows: usize, in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * out_dim];
    let work = rows * in_dim * out_dim;
    let row_job = |r: usize, out_row: &mut [f64]| {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            out_row[o] = b[o] + dot(xr, wr);
        }
    };
    if work > PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(out_dim)
            .enumerate()
            .for_each(|(r, chunk)| row_job(r, chunk));
    } else {
        for (r, chunk) in out.chunks_mut(out_dim).enumerate() {
            row_job(r, chunk);
        }
    }
    out
}

// Four-accumulator dot product: fixed summation order (bit-reproducible)
// while still letting the compiler vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contrib: impl FnOnce(&mut [f64])) {
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    contrib(slot.as_mut().unwrap().data_mut());
}

fn apply_backward(op: &Op, out_data: &Tensor, up: &Tensor, before: &mut [Node]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for idx in [*a, *b] {
                let shape = before[idx].data.shape().to_vec();
                accumulate(&mut before[idx].grad, &shape, |g| {
                    for (gi, ui) in g.iter_mut().zip(up.data()) {
                        *gi += ui;
                    }
                });
            }
        }
        Op::Sub(a, b) => {
            let shape_a = before[*a].data.shape().to_vec();
            accumulate(&mut before[*a].grad, &shape_a, |g| {
                for (gi, ui) in g.iter_mut().zip(up.data()) {
                    *gi += ui;
                }
            });
            let shape_b = before[*b].data.shape().to_vec();
            accumulate(&mut before[*b].grad, &shape_b, |g| {
                for (gi, ui) in g.iter_mut().zip(up.data()) {
                    *gi -= ui;
                }
            });
        }
        Op::Mul(a, b) => {
            let a_data = before[*a].data.clone();
            let b_data = before[*b].data.clone();
            accumulate(&mut before[*a].grad, a_data.shape(), |g| {
                for ((gi, ui), bi) in g.iter_mut().zip(up.data()).zip(b_data.data()) {
                    *gi += ui * bi;
                }
            });
            accumulate(&mut before[*b].grad, b_data.shape(), |g| {
                for ((gi, ui), ai) in g.iter_mut().zip(up.data()).zip(a_data.data()) {
                    *gi += ui * ai;
                }
            });
        }
        Op::Affine { x, a } => {
            let shape = before[*x].data.shape().to_vec();
            accumulate(&mut before[*x].grad, &shape, |g| {
                for (gi, ui) in g.iter_mut().zip(up.data()) {
                    *gi += a * ui;
                }
            });
        }
        Op::AddTensor { x } => {
            let shape = before[*x].data.shape().to_vec();
            accumulate(&mut before[*x].grad, &shape, |g| {
                for (gi, ui) in g.iter_mut().zip(up.data()) {
                    *gi += ui;
                }
            });
        }
        Op::MulTensor { x, c } => {
            let shape = before[*x].data.shape().to_vec();
            accumulate(&mut before[*x].grad, &shape, |g| {
                for ((gi, ui), ci) in g.iter_mut().zip(up.data()).zip(c.data()) {
                    *gi += ui * ci;
                }
            });
        }
        Op::Linear { x, w, b } => {
            let x_data = before[*x].data.clone();
            let w_data = before[*w].data.clone();
            let (out_dim, in_dim) = {
                let ws = w_data.shape();
                (ws[0], ws[1])
            };
            let rows = x_data.numel() / in_dim;
            let dy = up.data();
            // dx[r, :] += Σ_o dy[r, o] · w[o, :]
            let x_shape = x_data.shape().to_vec();
            accumulate(&mut before[*x].grad, &x_shape, |g| {
                let wd = w_data.data();
                let job = |r: usize, grow: &mut [f64]| {
                    for o in 0..out_dim {
                        let a = dy[r * out_dim + o];
                        if a == 0.0 {
                            continue;
                        }
                        let wr = &wd[o * in_dim..(o + 1) * in_dim];
                        for (gi, wi) in grow.iter_mut().zip(wr) {
                            *gi += a * wi;
                        }
                    }
                };
                if rows * in_dim * out_dim > PAR_FLOP_THRESHOLD {
                    g.par_chunks_mut(in_dim).enumerate().for_each(|(r, c)| job(r, c));
                } else {
                    for (r, c) in g.chunks_mut(in_dim).enumerate() {
                        job(r, c);
                    }
                }
            });
            // dw[o, :] += Σ_r dy[r, o] · x[r, :]
            let w_shape = w_data.shape().to_vec();
            accumulate(&mut before[*w].grad, &w_shape, |g| {
                let xd = x_data.data();
                let job = |o: usize, grow: &mut [f64]| {
                    for r in 0..rows {
                        let a = dy[r * out_dim + o];
                        if a == 0.0 {
                            continue;
                        }
                        let xr = &xd[r * in_dim..(r + 1) * in_dim];
                        for (gi, xi) in grow.iter_mut().zip(xr) {
                            *gi += a * xi;
                        }
                    }
                };
                if rows * in_dim * out_dim > PAR_FLOP_THRESHOLD {
                    g.par_chunks_mut(in_dim).enumerate().for_each(|(o, c)| job(o, c));
                } else {
                    for (o, c) in g.chunks_mut(in_dim).enumerate() {
                        job(o, c);
                    }
                }
            });
            // db[o] += Σ_r dy[r, o]
            let b_shape = before[*b].data.shape().to_vec();
            accumulate(&mut before[*b].grad, &b_shape, |g| {
                for r in 0..rows {
                    for o in 0..out_dim {
                        g[o] += dy[r * out_dim + o];
                    }
                }
            });
        }
        Op::Elu(x) => {
            let x_data = before[*x].data.clone();
            accumulate(&mut before[*x].grad, x_data.shape(), |g| {
                for ((gi, ui), xi) in g.iter_mut().zip(up.data()).zip(x_data.data()) {
                    let d = if *xi > 0.0 { 1.0 } else { xi.exp() };
                    *gi += ui * d;
                }
            });
        }
        Op::Relu(x) => {
            let x_data = before[*x].data.clone();
            accumulate(&mut before[*x].grad, x_data.shape(), |g| {
                for ((gi, ui), xi) in g.iter_mut().zip(up.data()).zip(x_data.data()) {
                    if *xi > 0.0 {
                        *gi += ui;
                    }
                }
            });
        }
        Op::Exp(x) => {
            let shape = before[*x].data.shape().to_vec();
            accumulate(&mut before[*x].grad, &shape, |g| {
                for ((gi, ui), yi) in g.iter_mut().zip(up.data()).zip(out_data.data()) {
                    *gi += ui * yi;
                }
            });
        }
        Op::Ln(x) => {
            let x_data = before[*x].data.clone();
            accumulate(&mut before[*x].grad, x_data.shape(), |g| {
                for ((gi, ui), xi) in g.iter_mut().zip(up.data()).zip(x_data.data()) {
                    *gi += ui / xi;
                }
            });
        }
        Op::Softplus(x) => {
            let x_data = before[*x].data.clone();
            accumulate(&mut before[*x].grad, x_data.shape(), |g| {
                for ((gi, ui), xi) in g.iter_mut().zip(up.data()).zip(x_data.data()) {
                    let s = 1.0 / (1.0 + (-xi).exp());
                    *gi += ui * s;
                }
            });
        }
        Op::Square(x) => {
            let x_data = before[*x].data.clone();
            accumulate(&mut before[*x].grad, x_data.shape(), |g| {
                for ((gi, ui), xi) in g.iter_mut().zip(up.data()).zip(x_data.data()) {
                    *gi += ui * 2.0 * xi;
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let x_data = before[*x].data.clone();
            accumulate(&mut before[*x].grad, x_data.shape(), |g| {
                for ((gi, ui), xi) in g.iter_mut().zip(up.data()).zip(x_data.data()) {
                    if *xi >= *lo && *xi <= *hi {
                        *gi += ui;
                    }
                }
            });
        }
        Op::Concat { parts } => {
            let rank = out_data.shape().len();
            let total_cols = out_data.shape()[rank - 1];
            let rows: usize = out_data.shape()[..rank - 1].iter().product();
            let mut col_off = 0;
            for &pid in parts {
                let p_shape = before[pid].data.shape().to_vec();
                let cols = p_shape[p_shape.len() - 1];
                accumulate(&mut before[pid].grad, &p_shape, |g| {
                    for r in 0..rows {
                        let src = &up.data()[r * total_cols + col_off..r * total_cols + col_off + cols];
                        for (gi, ui) in g[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *gi += ui;
                        }
                    }
                });
                col_off += cols;
            }
        }
        Op::SliceCols { x, start } => {
            let x_shape = before[*x].data.shape().to_vec();
            let rank = x_shape.len();
            let cols = x_shape[rank - 1];
            let len = out_data.shape()[rank - 1];
            let rows: usize = x_shape[..rank - 1].iter().product();
            accumulate(&mut before[*x].grad, &x_shape, |g| {
                for r in 0..rows {
                    let src = &up.data()[r * len..(r + 1) * len];
                    for (gi, ui) in g[r * cols + start..r * cols + start + len].iter_mut().zip(src) {
                        *gi += ui;
                    }
                }
            });
        }
        Op::Sum(x) => {
            let shape = before[*x].data.shape().to_vec();
            let u = up.data()[0];
            accumulate(&mut before[*x].grad, &shape, |g| {
                for gi in g.iter_mut() {
                    *gi += u;
                }
            });
        }
        Op::Mean(x) => {
            let shape = before[*x].data.shape().to_vec();
            let n: usize = shape.iter().product();
            let u = up.data()[0] / n as f64;
            accumulate(&mut before[*x].grad, &shape, |g| {
                for gi in g.iter_mut() {
                    *gi += u;
                }
            });
        }
        Op::LinComb { terms } => {
            for (c, idx) in terms {
                let shape = before[*idx].data.shape().to_vec();
                accumulate(&mut before[*idx].grad, &shape, |g| {
                    for (gi, ui) in g.iter_mut().zip(up.data()) {
                        *gi += c * ui;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_backward() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let loss = a.add(&b).sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().data(), &[1.0, 1.0]);
        assert_eq!(b.grad().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(a.backward().is_err());
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![0.5, -0.3]));
        let l1 = a.square().sum();
        let l2 = a.affine(3.0, 0.0).sum();
        let total = l1.add(&l2);
        total.backward().unwrap();
        let g_total = a.grad();

        let tape2 = Tape::new();
        let a2 = tape2.leaf(Tensor::vector(vec![0.5, -0.3]));
        let l1b = a2.square().sum();
        l1b.backward().unwrap();
        let g1 = a2.grad();
        let l2b = a2.affine(3.0, 0.0).sum();
        l2b.backward().unwrap();
        let g2 = a2.grad();

        for i in 0..2 {
            assert!((g_total.data()[i] - (g1.data()[i] + g2.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_parameter_has_zero_grad() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0]));
        let b = tape.leaf(Tensor::vector(vec![2.0]));
        let loss = a.square().sum();
        loss.backward().unwrap();
        assert_eq!(b.grad().data(), &[0.0]);
    }

    #[test]
    fn slice_concat_roundtrip_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::matrix(2, 1, vec![5.0, 6.0]));
        let cat = tape.concat(&[&a, &b]);
        assert_eq!(cat.shape(), &[2, 3]);
        assert_eq!(cat.data().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = cat.slice_cols(2, 1);
        let loss = back.sum();
        loss.backward().unwrap();
        assert_eq!(b.grad().data(), &[1.0, 1.0]);
        assert_eq!(a.grad().data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_matches_manual() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let w = tape.leaf(Tensor::matrix(1, 2, vec![2.0, -1.0]));
        let b = tape.leaf(Tensor::vector(vec![0.5]));
        let y = x.linear(&w, &b);
        assert_eq!(y.data().data(), &[1.5]);
        let loss = y.sum();
        loss.backward().unwrap();
        // loss = w·x + b  =>  dW = x
        assert_eq!(w.grad().data(), &[1.0, 1.0]);
        assert_eq!(x.grad().data(), &[2.0, -1.0]);
        assert_eq!(b.grad().data(), &[1.0]);
    }
}
