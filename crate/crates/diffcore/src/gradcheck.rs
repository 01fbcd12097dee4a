//! Central finite-difference gradient oracle.
//!
//! Re-evaluates a scalar loss with perturbed inputs; independent of the tape
//! backward pass it is used to check.

use crate::tensor::Tensor;

/// Central finite differences of `loss` at `params`, step `h` per element.
pub fn finite_difference_grads(
    params: &[Tensor],
    h: f64,
    mut loss: impl FnMut(&[Tensor]) -> f64,
) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape());
        for ei in 0..params[pi].numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += h;
            let f_plus = loss(&plus);
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= h;
            let f_minus = loss(&minus);
            g.data_mut()[ei] = (f_plus - f_minus) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative error between analytic and finite-difference gradients,
/// with an absolute floor so near-zero entries do not inflate the ratio.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch in comparison");
        for (x, y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
