//! Finite-difference oracle checks for every differentiable op, plus the
//! determinism and linearity properties.

use diffcore::gradcheck::{finite_difference_grads, max_rel_error};
use diffcore::{Activation, Mlp, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;

/// Build a scalar loss from leaf tensors twice: once on tape (analytic
/// grads), once as an f64 closure for the finite-difference oracle.
fn check_op(
    params: Vec<Tensor>,
    build: impl Fn(&Tape, &[diffcore::DiffValue]) -> diffcore::DiffValue,
) {
    let tape = Tape::new();
    let leaves: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&tape, &leaves);
    loss.backward().unwrap();
    let analytic: Vec<_> = leaves.iter().map(|l| l.grad()).collect();

    let numeric = finite_difference_grads(&params, H, |ps| {
        let t = Tape::new();
        let ls: Vec<_> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        build(&t, &ls).item()
    });

    let err = max_rel_error(&analytic, &numeric, 1e-6);
    assert!(err < REL_TOL, "finite-difference mismatch: rel err {err:e}");
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.5, 1.5, rng)
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[3, 4], &mut rng);

    check_op(vec![a.clone(), b.clone()], |_, ls| ls[0].add(&ls[1]).square().sum());
    check_op(vec![a.clone(), b.clone()], |_, ls| ls[0].sub(&ls[1]).square().mean());
    check_op(vec![a.clone(), b.clone()], |_, ls| ls[0].mul(&ls[1]).sum());
    check_op(vec![a.clone()], |_, ls| ls[0].affine(-2.5, 0.75).square().sum());
    check_op(vec![a.clone()], |_, ls| ls[0].elu().sum());
    check_op(vec![a.clone()], |_, ls| ls[0].exp().sum());
    check_op(vec![a.clone()], |_, ls| ls[0].softplus().sum());
    check_op(vec![a.clone()], |_, ls| ls[0].square().mean());
    // ln over strictly positive inputs
    let mut rng2 = ChaCha8Rng::seed_from_u64(12);
    let pos = Tensor::rand_uniform(&[3, 4], 0.3, 2.0, &mut rng2);
    check_op(vec![pos], |_, ls| ls[0].ln().sum());
    // relu / clamp away from their kinks (finite differences straddle them)
    let shifted = Tensor::rand_uniform(&[3, 4], 0.2, 1.2, &mut rng2);
    check_op(vec![shifted.clone()], |_, ls| ls[0].relu().square().sum());
    check_op(vec![shifted], |_, ls| ls[0].clamp(0.1, 0.9).square().sum());
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[2, 2], &mut rng);
    check_op(vec![a.clone(), b.clone()], |t, ls| {
        t.concat(&[&ls[0], &ls[1]]).square().sum()
    });
    check_op(vec![a.clone()], |_, ls| ls[0].slice_cols(1, 2).square().sum());
    check_op(vec![a.clone(), b.clone()], |t, ls| {
        let left = ls[0].slice_cols(0, 2);
        t.lin_comb(&[(0.5, &left), (-1.25, &ls[1])]).square().sum()
    });
    let eps = rand_tensor(&[2, 3], &mut rng);
    check_op(vec![a.clone()], |_, ls| ls[0].mul_tensor(&eps).sum());
    check_op(vec![a], |_, ls| ls[0].add_tensor(&eps).square().sum());
}

#[test]
fn linear_layer_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_tensor(&[4, 3], &mut rng);
    let w = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[2], &mut rng);
    check_op(vec![x, w, b], |_, ls| ls[0].linear(&ls[1], &ls[2]).square().sum());
}

#[test]
fn mse_of_one_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_tensor(&[5, 3], &mut rng);
    let target = rand_tensor(&[5, 2], &mut rng);
    let w = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[2], &mut rng);
    let neg_target = Tensor::new(target.data().iter().map(|v| -v).collect(), target.shape());
    check_op(vec![w, b], |t, ls| {
        let xv = t.leaf(x.clone());
        xv.linear(&ls[0], &ls[1]).add_tensor(&neg_target).square().mean()
    });
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mlp = Mlp::new(&[3, 6, 6, 2], Activation::Elu, &mut rng);
    let x = rand_tensor(&[4, 3], &mut rng);

    let mut named = Vec::new();
    mlp.named_params("net", &mut named);
    let params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();

    let rebuild = |ps: &[Tensor]| -> Mlp {
        let mut m = mlp.clone();
        let mut it = ps.iter();
        for layer in &mut m.layers {
            layer.w = it.next().unwrap().clone();
            layer.b = it.next().unwrap().clone();
        }
        m
    };

    let tape = Tape::new();
    let bound = mlp.bind(&tape);
    let loss = bound.forward(&tape.leaf(x.clone())).unwrap().square().mean();
    loss.backward().unwrap();
    let analytic = bound.grads();

    let numeric = finite_difference_grads(&params, H, |ps| {
        let m = rebuild(ps);
        let t = Tape::new();
        m.bind(&t).forward(&t.leaf(x.clone())).unwrap().square().mean().item()
    });
    let err = max_rel_error(&analytic, &numeric, 1e-6);
    assert!(err < REL_TOL, "mlp gradient mismatch: rel err {err:e}");
}

#[test]
fn w_times_x_sum_gradient_is_input() {
    // loss = sum(W·x), x = [1, 1]  =>  dloss/dW = [[1, 1]]
    let tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 1.0]));
    let w = tape.leaf(Tensor::matrix(1, 2, vec![0.3, -0.7]));
    let b = tape.leaf(Tensor::vector(vec![0.0]));
    let loss = x.linear(&w, &b).sum();
    loss.backward().unwrap();
    assert_eq!(w.grad().data(), &[1.0, 1.0]);
}

#[test]
fn evaluation_is_deterministic_across_repeats() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mlp = Mlp::new(&[4, 8, 3], Activation::Elu, &mut rng);
        let x = Tensor::rand_uniform(&[64, 4], -2.0, 2.0, &mut rng);
        let tape = Tape::new();
        let bound = mlp.bind(&tape);
        let loss = bound.forward(&tape.leaf(x)).unwrap().square().mean();
        loss.backward().unwrap();
        let mut bits: Vec<u64> = vec![loss.item().to_bits()];
        for g in bound.grads() {
            bits.extend(g.data().iter().map(|v| v.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Gradient of a sum of losses equals the sum of the individual
        /// gradients (linearity of the backward pass).
        #[test]
        fn backward_is_linear(values in proptest::collection::vec(-3.0f64..3.0, 4), c1 in -2.0f64..2.0, c2 in -2.0f64..2.0) {
            let build = |with_first: bool, with_second: bool| -> Tensor {
                let tape = Tape::new();
                let a = tape.leaf(Tensor::vector(values.clone()));
                let l1 = a.square().sum().affine(c1, 0.0);
                let l2 = a.elu().sum().affine(c2, 0.0);
                let loss = match (with_first, with_second) {
                    (true, true) => l1.add(&l2),
                    (true, false) => l1,
                    (false, true) => l2,
                    _ => unreachable!(),
                };
                loss.backward().unwrap();
                a.grad()
            };
            let g_sum = build(true, true);
            let g1 = build(true, false);
            let g2 = build(false, true);
            for i in 0..values.len() {
                let expect = g1.data()[i] + g2.data()[i];
                prop_assert!((g_sum.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }

        /// Random small shapes: analytic vs central finite differences.
        #[test]
        fn random_small_graphs_pass_gradcheck(rows in 1usize..4, cols in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::rand_uniform(&[rows, cols], -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[rows, cols], -1.0, 1.0, &mut rng);
            let tape = Tape::new();
            let la = tape.leaf(a.clone());
            let lb = tape.leaf(b.clone());
            let loss = la.mul(&lb).add(&la.elu()).square().mean();
            loss.backward().unwrap();
            let analytic = vec![la.grad(), lb.grad()];
            let numeric = finite_difference_grads(&[a, b], H, |ps| {
                let t = Tape::new();
                let x = t.leaf(ps[0].clone());
                let y = t.leaf(ps[1].clone());
                x.mul(&y).add(&x.elu()).square().mean().item()
            });
            let err = max_rel_error(&analytic, &numeric, 1e-6);
            prop_assert!(err < REL_TOL, "rel err {err:e}");
        }
    }
}
