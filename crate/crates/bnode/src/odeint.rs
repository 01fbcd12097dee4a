//! Fixed-step (Euler, RK4) and adaptive (Dormand–Prince 4(5)) integrators
//! over a right-hand-side callback.
//!
//! The fixed-step methods are generic over [`OdeState`] so the same code
//! integrates plain `Vec<f64>` states for physics simulation and
//! tape-recorded [`diffcore::DiffValue`] states for discretize-then-optimize
//! training. The adaptive method is evaluation-only and works on flat `f64`
//! batches with worst-sample error control.
//!
//! Inputs are piecewise constant per output interval; the rhs callback
//! receives the interval index alongside `t` and the state.

use diffcore::DiffValue;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Equidistant output grid: `points() = intervals + 1` sample times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub intervals: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, dt: f64) -> Result<TimeGrid> {
        if !(dt > 0.0) || !t0.is_finite() || !(t_end > t0) {
            return Err(Error::Config(format!(
                "invalid time grid: t0 = {t0}, t_end = {t_end}, dt = {dt}"
            )));
        }
        let raw = (t_end - t0) / dt;
        let intervals = raw.round() as usize;
        if intervals == 0 || (raw - intervals as f64).abs() > 1e-6 * raw.max(1.0) {
            return Err(Error::Config(format!(
                "grid span {} is not an integer multiple of dt = {dt}",
                t_end - t0
            )));
        }
        Ok(TimeGrid { t0, dt, intervals })
    }

    pub fn points(&self) -> usize {
        self.intervals + 1
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + self.dt * i as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.points()).map(|i| self.time(i)).collect()
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.intervals)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Fixed-step substeps per output interval.
    pub substeps: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Adaptive step budget per output interval.
    pub max_steps: usize,
}

impl SolverConfig {
    pub fn fixed(method: Method, substeps: usize) -> SolverConfig {
        SolverConfig {
            method,
            substeps,
            rtol: 0.0,
            atol: 0.0,
            max_steps: 0,
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> SolverConfig {
        SolverConfig {
            method: Method::Dopri5,
            substeps: 1,
            rtol,
            atol,
            max_steps: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method != Method::Dopri5 && self.substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        if self.method == Method::Dopri5 && (!(self.rtol > 0.0) || !(self.atol > 0.0)) {
            return Err(Error::Config(format!(
                "adaptive tolerances must be positive: rtol = {}, atol = {}",
                self.rtol, self.atol
            )));
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::dopri5(1e-6, 1e-8)
    }
}

/// Vector-space interface the fixed-step integrators need. `lin_comb` builds
/// Σ cᵢ·xᵢ; on a tape state this records one node.
pub trait OdeState: Clone {
    fn lin_comb(terms: &[(f64, &Self)]) -> Self;
    fn all_finite(&self) -> bool;
}

impl OdeState for Vec<f64> {
    fn lin_comb(terms: &[(f64, &Self)]) -> Self {
        let n = terms[0].1.len();
        let mut out = vec![0.0; n];
        for (c, v) in terms {
            debug_assert_eq!(v.len(), n);
            for (o, x) in out.iter_mut().zip(v.iter()) {
                *o += c * x;
            }
        }
        out
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl OdeState for DiffValue {
    fn lin_comb(terms: &[(f64, &Self)]) -> Self {
        terms[0].1.tape().lin_comb(terms)
    }

    fn all_finite(&self) -> bool {
        DiffValue::all_finite(self)
    }
}

/// Trajectory at every grid point (including `t0`) plus the rhs-evaluation
/// count.
pub struct Integration<S> {
    pub states: Vec<S>,
    pub rhs_evals: usize,
    pub accepted_steps: usize,
}

impl<S> std::fmt::Debug for Integration<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Integration")
            .field("points", &self.states.len())
            .field("rhs_evals", &self.rhs_evals)
            .field("accepted_steps", &self.accepted_steps)
            .finish()
    }
}

/// Integration failure carrying the partial trajectory up to the failure.
pub struct IntegrationFailure<S> {
    pub partial: Vec<S>,
    pub t_fail: f64,
    pub reason: String,
}

impl<S> std::fmt::Debug for IntegrationFailure<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IntegrationFailure")
            .field("t_fail", &self.t_fail)
            .field("reason", &self.reason)
            .field("partial_points", &self.partial.len())
            .finish()
    }
}

impl<S> IntegrationFailure<S> {
    pub fn to_error(&self) -> Error {
        Error::Integration {
            t: self.t_fail,
            reason: self.reason.clone(),
        }
    }
}

/// Fixed-step integration (Euler or RK4), generic over the state type.
/// Returns states at every grid point; the step sequence is deterministic.
pub fn integrate_fixed<S: OdeState>(
    rhs: &mut dyn FnMut(f64, &S, usize) -> S,
    x0: &S,
    grid: &TimeGrid,
    method: Method,
    substeps: usize,
) -> std::result::Result<Integration<S>, IntegrationFailure<S>> {
    assert!(substeps >= 1, "substeps must be >= 1");
    assert!(method != Method::Dopri5, "integrate_fixed is for fixed-step methods");
    let mut states = Vec::with_capacity(grid.points());
    states.push(x0.clone());
    let mut evals = 0usize;
    let h = grid.dt / substeps as f64;
    for interval in 0..grid.intervals {
        let mut x = states[interval].clone();
        for s in 0..substeps {
            let t = grid.time(interval) + h * s as f64;
            x = match method {
                Method::Euler => {
                    let k1 = rhs(t, &x, interval);
                    evals += 1;
                    S::lin_comb(&[(1.0, &x), (h, &k1)])
                }
                Method::Rk4 => {
                    let k1 = rhs(t, &x, interval);
                    let x2 = S::lin_comb(&[(1.0, &x), (0.5 * h, &k1)]);
                    let k2 = rhs(t + 0.5 * h, &x2, interval);
                    let x3 = S::lin_comb(&[(1.0, &x), (0.5 * h, &k2)]);
                    let k3 = rhs(t + 0.5 * h, &x3, interval);
                    let x4 = S::lin_comb(&[(1.0, &x), (h, &k3)]);
                    let k4 = rhs(t + h, &x4, interval);
                    evals += 4;
                    S::lin_comb(&[
                        (1.0, &x),
                        (h / 6.0, &k1),
                        (h / 3.0, &k2),
                        (h / 3.0, &k3),
                        (h / 6.0, &k4),
                    ])
                }
                Method::Dopri5 => unreachable!(),
            };
        }
        if !x.all_finite() {
            return Err(IntegrationFailure {
                partial: states,
                t_fail: grid.time(interval + 1),
                reason: "non-finite state".into(),
            });
        }
        states.push(x);
    }
    Ok(Integration {
        states,
        rhs_evals: evals,
        accepted_steps: grid.intervals * substeps,
    })
}

/// Flat batch of states: `n` samples × `dim` entries, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchState {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl BatchState {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> BatchState {
        assert_eq!(data.len(), n * dim);
        BatchState { n, dim, data }
    }

    pub fn single(x: Vec<f64>) -> BatchState {
        let dim = x.len();
        BatchState { n: 1, dim, data: x }
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

// Dormand–Prince 4(5) tableau, FSAL.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince 4(5) over a state batch. One shared step sequence
/// for the whole batch; acceptance is governed by the worst per-sample RMS
/// scaled error. Integration restarts at every output interval because the
/// piecewise-constant inputs make the rhs discontinuous there.
pub fn integrate_batched_adaptive(
    rhs: &mut dyn FnMut(f64, &BatchState, usize) -> BatchState,
    x0: &BatchState,
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> std::result::Result<Integration<BatchState>, IntegrationFailure<BatchState>> {
    let (rtol, atol) = (cfg.rtol, cfg.atol);
    assert!(rtol > 0.0 && atol > 0.0, "adaptive tolerances must be positive");
    let max_steps = if cfg.max_steps == 0 { 100_000 } else { cfg.max_steps };
    let mut states = Vec::with_capacity(grid.points());
    states.push(x0.clone());
    let mut evals = 0usize;
    let mut accepted = 0usize;
    let mut h_carry = grid.dt;

    for interval in 0..grid.intervals {
        let t_start = grid.time(interval);
        let t_end = grid.time(interval + 1);
        let mut t = t_start;
        let mut y = states[interval].clone();
        // FSAL seed for this interval (controls changed at the boundary).
        let mut k1 = rhs(t, &y, interval);
        evals += 1;
        let mut h = h_carry.min(grid.dt);
        let mut steps = 0usize;

        while t < t_end - 1e-14 * grid.dt.max(1.0) {
            if steps >= max_steps {
                return Err(IntegrationFailure {
                    partial: states,
                    t_fail: t,
                    reason: format!("adaptive step budget of {max_steps} exceeded"),
                });
            }
            h = h.min(t_end - t);
            let mut ks: Vec<BatchState> = Vec::with_capacity(7);
            ks.push(k1.clone());
            for stage in 0..6 {
                let mut terms: Vec<(f64, &BatchState)> = vec![(1.0, &y)];
                for (j, aij) in DP_A[stage].iter().enumerate() {
                    if *aij != 0.0 {
                        terms.push((h * aij, &ks[j]));
                    }
                }
                let y_stage = <Vec<f64> as OdeState>::lin_comb(
                    &terms
                        .iter()
                        .map(|(c, s)| (*c, &s.data))
                        .collect::<Vec<_>>(),
                );
                let y_stage = BatchState::new(y.n, y.dim, y_stage);
                ks.push(rhs(t + DP_C[stage + 1] * h, &y_stage, interval));
                evals += 1;
            }

            // 5th-order candidate and embedded error estimate.
            let mut y_new = y.data.clone();
            let mut err = vec![0.0; y.data.len()];
            for (i, k) in ks.iter().enumerate() {
                let b5 = DP_B5[i];
                let de = DP_B5[i] - DP_B4[i];
                if b5 != 0.0 || de != 0.0 {
                    for j in 0..y.data.len() {
                        y_new[j] += h * b5 * k.data[j];
                        err[j] += h * de * k.data[j];
                    }
                }
            }

            // Worst sample decides: max over samples of RMS scaled error.
            let mut err_norm: f64 = 0.0;
            for s in 0..y.n {
                let mut acc = 0.0;
                for j in 0..y.dim {
                    let idx = s * y.dim + j;
                    let sc = atol + rtol * y.data[idx].abs().max(y_new[idx].abs());
                    let e = err[idx] / sc;
                    acc += e * e;
                }
                err_norm = err_norm.max((acc / y.dim as f64).sqrt());
            }

            steps += 1;
            if !err_norm.is_finite() {
                return Err(IntegrationFailure {
                    partial: states,
                    t_fail: t,
                    reason: "non-finite error estimate".into(),
                });
            }
            if err_norm <= 1.0 {
                t += h;
                y = BatchState::new(y.n, y.dim, y_new);
                k1 = ks.pop().unwrap(); // FSAL: k7 at (t, y)
                accepted += 1;
            }
            let factor = if err_norm > 0.0 {
                (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
            } else {
                5.0
            };
            h *= factor;
        }

        if !y.data.iter().all(|v| v.is_finite()) {
            return Err(IntegrationFailure {
                partial: states,
                t_fail: t_end,
                reason: "non-finite state".into(),
            });
        }
        h_carry = h;
        states.push(y);
    }

    Ok(Integration {
        states,
        rhs_evals: evals,
        accepted_steps: accepted,
    })
}

/// Single-trajectory integration over `Vec<f64>`, dispatching on the method.
pub fn integrate(
    rhs: &mut dyn FnMut(f64, &[f64], usize) -> Vec<f64>,
    x0: &[f64],
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> std::result::Result<Integration<Vec<f64>>, IntegrationFailure<Vec<f64>>> {
    match cfg.method {
        Method::Euler | Method::Rk4 => {
            let mut wrapped = |t: f64, x: &Vec<f64>, k: usize| rhs(t, x, k);
            integrate_fixed(&mut wrapped, &x0.to_vec(), grid, cfg.method, cfg.substeps)
        }
        Method::Dopri5 => {
            let mut wrapped = |t: f64, x: &BatchState, k: usize| {
                BatchState::single(rhs(t, &x.data, k))
            };
            match integrate_batched_adaptive(&mut wrapped, &BatchState::single(x0.to_vec()), grid, cfg) {
                Ok(res) => Ok(Integration {
                    states: res.states.into_iter().map(|b| b.data).collect(),
                    rhs_evals: res.rhs_evals,
                    accepted_steps: res.accepted_steps,
                }),
                Err(f) => Err(IntegrationFailure {
                    partial: f.partial.into_iter().map(|b| b.data).collect(),
                    t_fail: f.t_fail,
                    reason: f.reason,
                }),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay_rhs(_t: f64, x: &Vec<f64>, _k: usize) -> Vec<f64> {
        x.iter().map(|v| -v).collect()
    }

    #[test]
    fn rk4_single_step_matches_hand_computation() {
        let grid = TimeGrid::new(0.0, 0.1, 0.1).unwrap();
        let mut rhs = decay_rhs;
        let res = integrate_fixed(&mut rhs, &vec![1.0], &grid, Method::Rk4, 1).unwrap();
        let x1 = res.states[1][0];
        assert!((x1 - 0.9048375).abs() < 1e-12, "x1 = {x1}");
        assert!((x1 - (-0.1f64).exp()).abs() < 1e-6);
        assert_eq!(res.rhs_evals, 4);
    }

    #[test]
    fn zero_rhs_keeps_trajectory_constant() {
        let grid = TimeGrid::new(0.0, 1.0, 0.25).unwrap();
        let mut rhs = |_t: f64, x: &Vec<f64>, _k: usize| vec![0.0; x.len()];
        let res = integrate_fixed(&mut rhs, &vec![2.5, -1.0], &grid, Method::Euler, 3).unwrap();
        for s in &res.states {
            assert_eq!(s, &vec![2.5, -1.0]);
        }
    }

    #[test]
    fn dopri5_endpoint_matches_analytic_decay() {
        let grid = TimeGrid::new(0.0, 1.0, 0.5).unwrap();
        let cfg = SolverConfig::dopri5(1e-6, 1e-9);
        let mut rhs = |t: f64, x: &[f64], k: usize| decay_rhs(t, &x.to_vec(), k);
        let res = integrate(&mut rhs, &[1.0], &grid, &cfg).unwrap();
        let end = res.states.last().unwrap()[0];
        assert!((end - (-1.0f64).exp()).abs() < 1e-6, "endpoint {end}");
        assert!(res.rhs_evals > 0);
    }

    #[test]
    fn rk4_global_error_scales_as_h4() {
        // halving h must reduce the endpoint error by roughly 16x
        let err_for = |substeps: usize| {
            let grid = TimeGrid::new(0.0, 1.0, 1.0).unwrap();
            let mut rhs = decay_rhs;
            let res = integrate_fixed(&mut rhs, &vec![1.0], &grid, Method::Rk4, substeps).unwrap();
            (res.states[1][0] - (-1.0f64).exp()).abs()
        };
        let ratio = err_for(8) / err_for(16);
        assert!((8.0..32.0).contains(&ratio), "order-4 ratio was {ratio}");
    }

    #[test]
    fn batched_identical_problems_match_single_run() {
        let grid = TimeGrid::new(0.0, 1.0, 0.2).unwrap();
        let cfg = SolverConfig::dopri5(1e-6, 1e-9);
        let mut rhs_b = |_t: f64, x: &BatchState, _k: usize| {
            BatchState::new(x.n, x.dim, x.data.iter().map(|v| -v).collect())
        };
        let batch = integrate_batched_adaptive(
            &mut rhs_b,
            &BatchState::new(3, 1, vec![1.0, 1.0, 1.0]),
            &grid,
            &cfg,
        )
        .unwrap();
        let mut rhs_s = |t: f64, x: &[f64], k: usize| decay_rhs(t, &x.to_vec(), k);
        let single = integrate(&mut rhs_s, &[1.0], &grid, &cfg).unwrap();
        assert_eq!(batch.accepted_steps, single.accepted_steps);
        for (bs, ss) in batch.states.iter().zip(&single.states) {
            for i in 0..3 {
                assert_eq!(bs.sample(i)[0], ss[0]);
            }
        }
    }

    #[test]
    fn stiff_member_dominates_batch_step_count() {
        let grid = TimeGrid::new(0.0, 1.0, 0.5).unwrap();
        let cfg = SolverConfig::dopri5(1e-8, 1e-10);
        // smooth problem alone
        let mut smooth = |_t: f64, x: &BatchState, _k: usize| {
            BatchState::new(x.n, x.dim, x.data.iter().map(|v| -v).collect())
        };
        let smooth_run =
            integrate_batched_adaptive(&mut smooth, &BatchState::new(1, 1, vec![1.0]), &grid, &cfg)
                .unwrap();
        // mixed batch {stiff with rate -80, smooth}
        let mut mixed = |_t: f64, x: &BatchState, _k: usize| {
            let mut d = vec![0.0; x.data.len()];
            for s in 0..x.n {
                let rate = if s == 0 { -80.0 } else { -1.0 };
                d[s] = rate * x.data[s];
            }
            BatchState::new(x.n, x.dim, d)
        };
        let mixed_run = integrate_batched_adaptive(
            &mut mixed,
            &BatchState::new(2, 1, vec![1.0, 1.0]),
            &grid,
            &cfg,
        )
        .unwrap();
        assert!(
            mixed_run.accepted_steps >= smooth_run.accepted_steps,
            "stiff member should not lower the step count: {} vs {}",
            mixed_run.accepted_steps,
            smooth_run.accepted_steps
        );
    }

    #[test]
    fn zero_rhs_batch_takes_one_step_per_interval() {
        let grid = TimeGrid::new(0.0, 1.0, 0.25).unwrap();
        let cfg = SolverConfig::dopri5(1e-6, 1e-9);
        let mut rhs = |_t: f64, x: &BatchState, _k: usize| BatchState::new(x.n, x.dim, vec![0.0; x.data.len()]);
        let res =
            integrate_batched_adaptive(&mut rhs, &BatchState::new(2, 2, vec![1.0; 4]), &grid, &cfg)
                .unwrap();
        assert_eq!(res.accepted_steps, grid.intervals);
    }

    #[test]
    fn non_finite_state_reports_partial_trajectory_and_time() {
        let grid = TimeGrid::new(0.0, 1.0, 0.25).unwrap();
        // blows up in the third interval
        let mut rhs = |t: f64, x: &Vec<f64>, _k: usize| {
            if t >= 0.5 {
                vec![f64::NAN]
            } else {
                vec![x[0]]
            }
        };
        let err = integrate_fixed(&mut rhs, &vec![1.0], &grid, Method::Euler, 2).unwrap_err();
        assert_eq!(err.partial.len(), 3); // t0, t1, t2 survived
        assert!((err.t_fail - 0.75).abs() < 1e-12);
    }

    #[test]
    fn grid_validation_rejects_non_multiple_span() {
        assert!(TimeGrid::new(0.0, 1.0, 0.3).is_err());
        assert!(TimeGrid::new(0.0, -1.0, 0.1).is_err());
        let g = TimeGrid::new(0.2, 1.2, 0.002).unwrap();
        assert_eq!(g.points(), 501);
    }
}
