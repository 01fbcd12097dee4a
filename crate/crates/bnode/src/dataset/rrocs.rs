//! Smooth bounded control-signal sampling: random knots in a frequency band,
//! cubic-spline interpolation, normalization to [0, 1], then a random offset
//! and amplitude clipped so the signal stays inside the channel bounds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::odeint::TimeGrid;
use crate::{Error, Result};

/// Natural cubic spline through strictly increasing knots.
pub struct CubicSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>, // second derivatives, natural boundary (m[0] = m[last] = 0)
}

impl CubicSpline {
    pub fn fit(t: Vec<f64>, y: Vec<f64>) -> CubicSpline {
        assert_eq!(t.len(), y.len());
        assert!(!t.is_empty());
        let n = t.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for the interior second derivatives.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut lower = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = t[i] - t[i - 1];
                let h1 = t[i + 1] - t[i];
                lower[i - 1] = h0 / 6.0;
                diag[i - 1] = (h0 + h1) / 3.0;
                upper[i - 1] = h1 / 6.0;
                rhs[i - 1] = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
            }
            // Thomas algorithm.
            for i in 1..k {
                let w = lower[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            let mut sol = vec![0.0; k];
            sol[k - 1] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
            }
            m[1..=k].copy_from_slice(&sol);
        }
        CubicSpline { t, y, m }
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.t.len();
        if x <= self.t[0] {
            return 0;
        }
        if x >= self.t[n - 1] {
            return n - 2;
        }
        match self.t.partition_point(|ti| *ti <= x) {
            0 => 0,
            p => (p - 1).min(n - 2),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.t.len() == 1 {
            return self.y[0];
        }
        let i = self.segment(x);
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        let h = t1 - t0;
        let (a, b) = (t1 - x, x - t0);
        self.m[i] * a * a * a / (6.0 * h)
            + self.m[i + 1] * b * b * b / (6.0 * h)
            + (self.y[i] / h - self.m[i] * h / 6.0) * a
            + (self.y[i + 1] / h - self.m[i + 1] * h / 6.0) * b
    }

    /// First derivative; used to verify C¹ continuity at the knots.
    pub fn deriv(&self, x: f64) -> f64 {
        if self.t.len() == 1 {
            return 0.0;
        }
        let i = self.segment(x);
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        let h = t1 - t0;
        let (a, b) = (t1 - x, x - t0);
        -self.m[i] * a * a / (2.0 * h)
            + self.m[i + 1] * b * b / (2.0 * h)
            - (self.y[i] / h - self.m[i] * h / 6.0)
            + (self.y[i + 1] / h - self.m[i + 1] * h / 6.0)
    }

    pub fn knots(&self) -> &[f64] {
        &self.t
    }
}

/// Per-channel bounds plus the knot frequency band.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RrocsConfig {
    /// `[u_minus, u_plus]` per channel.
    pub bounds: Vec<(f64, f64)>,
    /// Knot spacing is drawn uniform in `[1/f_max, 1/f_min]`.
    pub f_min_hz: f64,
    pub f_max_hz: f64,
}

impl RrocsConfig {
    pub fn validate(&self, n_channels: usize) -> Result<()> {
        if self.bounds.len() != n_channels {
            return Err(Error::Config(format!(
                "RROCS bounds for {} channels, model has {}",
                self.bounds.len(),
                n_channels
            )));
        }
        for (lo, hi) in &self.bounds {
            if !(lo <= hi) {
                return Err(Error::Config(format!("RROCS bounds inverted: [{lo}, {hi}]")));
            }
        }
        if !(self.f_min_hz > 0.0) || !(self.f_max_hz >= self.f_min_hz) {
            return Err(Error::Config(format!(
                "RROCS frequency band invalid: [{}, {}] Hz",
                self.f_min_hz, self.f_max_hz
            )));
        }
        Ok(())
    }
}

/// One channel of one sample onto `grid`; consumes draws from `rng` in a
/// fixed order so per-sample streams stay reproducible.
pub fn sample_rrocs_channel(cfg: &RrocsConfig, channel: usize, grid: &TimeGrid, rng: &mut impl Rng) -> Vec<f64> {
    let (u_lo, u_hi) = cfg.bounds[channel];
    let span = u_hi - u_lo;

    // Knot times: intervals drawn uniform in [1/f_max, 1/f_min].
    let mut knot_t = vec![grid.t0];
    let (dt_min, dt_max) = (1.0 / cfg.f_max_hz, 1.0 / cfg.f_min_hz);
    while *knot_t.last().unwrap() < grid.t_end() {
        let step = if dt_max > dt_min {
            rng.gen_range(dt_min..dt_max)
        } else {
            dt_min
        };
        knot_t.push(knot_t.last().unwrap() + step);
    }
    let knot_v: Vec<f64> = knot_t
        .iter()
        .map(|_| if span > 0.0 { rng.gen_range(u_lo..u_hi) } else { u_lo })
        .collect();

    let spline = CubicSpline::fit(knot_t, knot_v);
    let raw: Vec<f64> = grid.times().iter().map(|t| spline.eval(*t)).collect();

    // Normalize to [0, 1] over the grid; a flat spline maps to 0.5.
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let norm: Vec<f64> = if hi - lo > 0.0 {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; raw.len()]
    };

    // Random offset and amplitude, clipped so b + norm·Δ stays in bounds.
    let offset = if span > 0.0 { rng.gen_range(u_lo..u_hi) } else { u_lo };
    let delta_raw = if span > 0.0 { rng.gen_range(0.0..span) } else { 0.0 };
    let delta = delta_raw.min(u_hi - offset);

    norm.iter().map(|v| offset + v * delta).collect()
}

/// Control array for `n_samples × grid.points() × n_channels`, row-major.
/// Sample `i` draws from stream `i` of the seeded generator, so the output
/// is independent of evaluation order.
pub fn sample_rrocs(
    cfg: &RrocsConfig,
    grid: &TimeGrid,
    n_samples: usize,
    n_channels: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate(n_channels)?;
    if grid.points() == 0 {
        return Err(Error::Config("empty time grid".into()));
    }
    let points = grid.points();
    let mut out = vec![0.0; n_samples * points * n_channels];
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for j in 0..n_channels {
            let ch = sample_rrocs_channel(cfg, j, grid, &mut rng);
            for (k, v) in ch.iter().enumerate() {
                out[(i * points + k) * n_channels + j] = *v;
            }
        }
    }
    Ok(out)
}
