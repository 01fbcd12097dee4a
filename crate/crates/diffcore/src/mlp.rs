use rand::Rng;

use crate::tape::{DiffValue, Tape};
use crate::tensor::Tensor;
use crate::{DiffError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply_scalar(&self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Activation> {
        match tag {
            "elu" => Some(Activation::Elu),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: Tensor, // [out, in]
    pub b: Tensor, // [out]
}

/// MLP parameters: a chain of dense layers with the activation applied to
/// every layer except the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` = [in, hidden..., out]. Weights init uniform in ±sqrt(1/fan_in).
    pub fn new<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Mlp {
        assert!(sizes.len() >= 2, "mlp needs at least one layer");
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                DenseLayer {
                    w: Tensor::rand_uniform(&[fan_out, fan_in], -bound, bound, rng),
                    b: Tensor::rand_uniform(&[fan_out], -bound, bound, rng),
                }
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.shape()[0]
    }

    /// Record the parameters on `tape` so a forward pass can be differentiated.
    pub fn bind(&self, tape: &Tape) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
                .collect(),
            activation: self.activation,
        }
    }

    /// Tape-free forward pass over a `[n, in]` or `[in]` tensor. Same math
    /// as the bound version; used on inference paths that never backprop.
    pub fn forward_plain(&self, x: &Tensor) -> Tensor {
        let rank = x.shape().len();
        let in_dim = x.shape()[rank - 1];
        assert_eq!(in_dim, self.input_dim(), "mlp input width {} vs {}", in_dim, self.input_dim());
        let rows = x.numel() / in_dim;
        let mut cur = x.data().to_vec();
        let mut cur_dim = in_dim;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (out_dim, _) = (layer.w.shape()[0], layer.w.shape()[1]);
            let mut next = vec![0.0; rows * out_dim];
            let wd = layer.w.data();
            let bd = layer.b.data();
            for r in 0..rows {
                let xr = &cur[r * cur_dim..(r + 1) * cur_dim];
                for o in 0..out_dim {
                    let wr = &wd[o * cur_dim..(o + 1) * cur_dim];
                    let mut s = bd[o];
                    for (xi, wi) in xr.iter().zip(wr) {
                        s += xi * wi;
                    }
                    next[r * out_dim + o] = if li < last { self.activation.apply_scalar(s) } else { s };
                }
            }
            cur = next;
            cur_dim = out_dim;
        }
        let mut shape = x.shape().to_vec();
        shape[rank - 1] = cur_dim;
        Tensor::new(cur, &shape)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.numel() + l.b.numel()).sum()
    }

    /// Named views for optimizers and checkpoints; `prefix` scopes the names.
    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.w{i}"), l.w.clone()));
            out.push((format!("{prefix}.b{i}"), l.b.clone()));
        }
    }

    pub fn assign_params(&mut self, prefix: &str, source: &mut dyn FnMut(&str) -> Option<Tensor>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(t) = source(&format!("{prefix}.w{i}")) {
                assert_eq!(t.shape(), l.w.shape(), "checkpoint shape mismatch for {prefix}.w{i}");
                l.w = t;
            }
            if let Some(t) = source(&format!("{prefix}.b{i}")) {
                assert_eq!(t.shape(), l.b.shape(), "checkpoint shape mismatch for {prefix}.b{i}");
                l.b = t;
            }
        }
    }
}

/// An [`Mlp`] whose parameters are recorded on a tape. Holds the leaf values
/// so gradients can be read back after `backward`.
pub struct BoundMlp {
    pub layers: Vec<(DiffValue, DiffValue)>,
    pub activation: Activation,
}

impl BoundMlp {
    /// Affine/activation chain. Rejects inputs whose width does not match
    /// the first layer.
    pub fn forward(&self, x: &DiffValue) -> Result<DiffValue> {
        let rank = x.shape().len();
        let in_dim = x.shape()[rank - 1];
        let expect = self.layers[0].0.shape()[1];
        if in_dim != expect {
            return Err(DiffError::ShapeMismatch {
                op: "mlp_forward",
                lhs: x.shape().to_vec(),
                rhs: self.layers[0].0.shape().to_vec(),
            });
        }
        let last = self.layers.len() - 1;
        let mut cur = x.clone();
        for (li, (w, b)) in self.layers.iter().enumerate() {
            cur = cur.linear(w, b);
            if li < last {
                cur = match self.activation {
                    Activation::Elu => cur.elu(),
                    Activation::Relu => cur.relu(),
                    Activation::Identity => cur,
                };
            }
        }
        Ok(cur)
    }

    /// Gradients per layer in the same order as [`Mlp::named_params`].
    pub fn grads(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (w, b) in &self.layers {
            out.push(w.grad());
            out.push(b.grad());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_single_layer_passthrough() {
        let mut mlp = Mlp {
            layers: vec![DenseLayer {
                w: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
                b: Tensor::vector(vec![0.0, 0.0]),
            }],
            activation: Activation::Identity,
        };
        mlp.activation = Activation::Identity;
        let tape = Tape::new();
        let bound = mlp.bind(&tape);
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = bound.forward(&x).unwrap();
        assert_eq!(y.data().data(), &[1.0, 2.0]);
    }

    #[test]
    fn single_layer_elu_matches_definition() {
        // W=[[2]], b=[1], input [-3]: pre-activation -5 only if ELU applied,
        // but the last layer is linear, so chain two layers to exercise ELU.
        let mlp = Mlp {
            layers: vec![
                DenseLayer {
                    w: Tensor::matrix(1, 1, vec![2.0]),
                    b: Tensor::vector(vec![1.0]),
                },
                DenseLayer {
                    w: Tensor::matrix(1, 1, vec![1.0]),
                    b: Tensor::vector(vec![0.0]),
                },
            ],
            activation: Activation::Elu,
        };
        let tape = Tape::new();
        let y = mlp
            .bind(&tape)
            .forward(&tape.leaf(Tensor::vector(vec![-3.0])))
            .unwrap();
        let expect = (-5.0f64).exp() - 1.0; // ≈ -0.99326
        assert!((y.data().data()[0] - expect).abs() < 1e-12);
        assert!((expect - (-0.99326)).abs() < 1e-5);
    }

    #[test]
    fn dead_relu_outputs_final_bias() {
        let mlp = Mlp {
            layers: vec![
                DenseLayer {
                    w: Tensor::matrix(2, 1, vec![1.0, 1.0]),
                    b: Tensor::vector(vec![0.0, 0.0]),
                },
                DenseLayer {
                    w: Tensor::matrix(1, 2, vec![3.0, -2.0]),
                    b: Tensor::vector(vec![0.25]),
                },
            ],
            activation: Activation::Relu,
        };
        let tape = Tape::new();
        let y = mlp
            .bind(&tape)
            .forward(&tape.leaf(Tensor::vector(vec![-4.0])))
            .unwrap();
        assert_eq!(y.data().data(), &[0.25]);
    }

    #[test]
    fn shape_mismatch_reports_dimensions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[3, 4, 2], Activation::Elu, &mut rng);
        let tape = Tape::new();
        let err = mlp
            .bind(&tape)
            .forward(&tape.leaf(Tensor::vector(vec![1.0, 2.0])))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("3"), "got: {msg}");
    }

    #[test]
    fn plain_forward_matches_bound_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::new(&[5, 8, 8, 3], Activation::Elu, &mut rng);
        let x = Tensor::rand_uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let y_bound = mlp.bind(&tape).forward(&tape.leaf(x.clone())).unwrap().data();
        let y_plain = mlp.forward_plain(&x);
        for (a, b) in y_bound.data().iter().zip(y_plain.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
