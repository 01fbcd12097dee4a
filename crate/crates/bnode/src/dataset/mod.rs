//! Dataset generation (sampling + simulation), standardization, bit-exact
//! persistence, splits and the moving-window subsequence sampler.

mod rrocs;
mod store;
mod window;

pub use rrocs::{sample_rrocs, sample_rrocs_channel, CubicSpline, RrocsConfig};
pub use store::{load_dataset, save_dataset};
pub use window::{assemble_window_batch, WindowBatch, WindowSampler};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::odeint::{integrate, SolverConfig, TimeGrid};
use crate::physics::DynamicalModel;
use crate::{Error, Result};

/// `[n, t, c]` array stored as f32 (the on-disk dtype); computation promotes
/// to f64 on extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Array3 {
    data: Vec<f32>,
    pub n: usize,
    pub t: usize,
    pub c: usize,
}

impl Array3 {
    pub fn zeros(n: usize, t: usize, c: usize) -> Array3 {
        Array3 {
            data: vec![0.0; n * t * c],
            n,
            t,
            c,
        }
    }

    pub fn from_f32(data: Vec<f32>, n: usize, t: usize, c: usize) -> Array3 {
        assert_eq!(data.len(), n * t * c);
        Array3 { data, n, t, c }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.t + j) * self.c + k] as f64
    }

    pub fn row(&self, i: usize, j: usize) -> &[f32] {
        let base = (i * self.t + j) * self.c;
        &self.data[base..base + self.c]
    }

    pub fn set_row(&mut self, i: usize, j: usize, values: &[f64]) {
        let base = (i * self.t + j) * self.c;
        for (slot, v) in self.data[base..base + self.c].iter_mut().zip(values) {
            *slot = *v as f32;
        }
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `[n, c]` array, f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Array2 {
    data: Vec<f32>,
    pub n: usize,
    pub c: usize,
}

impl Array2 {
    pub fn zeros(n: usize, c: usize) -> Array2 {
        Array2 {
            data: vec![0.0; n * c],
            n,
            c,
        }
    }

    pub fn from_f32(data: Vec<f32>, n: usize, c: usize) -> Array2 {
        assert_eq!(data.len(), n * c);
        Array2 { data, n, c }
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.c + k] as f64
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn set_row(&mut self, i: usize, values: &[f64]) {
        for (slot, v) in self.data[i * self.c..(i + 1) * self.c].iter_mut().zip(values) {
            *slot = *v as f32;
        }
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

/// Frozen per-channel mean and standard deviation. Parameters are pooled per
/// feature over samples; time-varying variables per feature over samples and
/// time. Degenerate channels (σ = 0) store σ = 1 so the transform is total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardStats {
    pub fn identity(channels: usize) -> StandardStats {
        StandardStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// (x − μ) / σ applied per channel over a `[..., c]` row-major slice.
    pub fn standardize(&self, x: &mut [f64]) {
        let c = self.mean.len();
        if c == 0 {
            return;
        }
        for row in x.chunks_mut(c) {
            for (v, (m, s)) in row.iter_mut().zip(self.mean.iter().zip(&self.std)) {
                *v = (*v - m) / s;
            }
        }
    }

    /// σ·x + μ, the exact algebraic inverse.
    pub fn unstandardize(&self, x: &mut [f64]) {
        let c = self.mean.len();
        if c == 0 {
            return;
        }
        for row in x.chunks_mut(c) {
            for (v, (m, s)) in row.iter_mut().zip(self.mean.iter().zip(&self.std)) {
                *v = s * *v + m;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub states: StandardStats,
    pub outputs: StandardStats,
    pub controls: StandardStats,
    pub parameters: StandardStats,
}

/// Aligned trajectory arrays with split assignment and frozen
/// standardization statistics. Raw (unstandardized) values are stored;
/// standardization happens on window extraction.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    pub states: Array3,     // [n, points, n_x]
    pub outputs: Array3,    // [n, points, n_y]
    pub controls: Array3,   // [n, points, n_u]
    pub parameters: Array2, // [n, n_p]
    pub grid: TimeGrid,
    pub splits: Vec<Split>,
    pub stats: DatasetStats,
    pub generator: serde_json::Value,
}

impl TrajectoryDataset {
    pub fn n_samples(&self) -> usize {
        self.states.n
    }

    pub fn points(&self) -> usize {
        self.states.t
    }

    pub fn state_dim(&self) -> usize {
        self.states.c
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.c
    }

    pub fn control_dim(&self) -> usize {
        self.controls.c
    }

    pub fn param_dim(&self) -> usize {
        self.parameters.c
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_samples();
        let t = self.points();
        if self.outputs.n != n || self.controls.n != n || self.parameters.n != n || self.splits.len() != n {
            return Err(Error::Dataset("sample counts inconsistent across arrays".into()));
        }
        if self.outputs.t != t || self.controls.t != t || self.grid.points() != t {
            return Err(Error::Dataset("time axes inconsistent across arrays".into()));
        }
        if !(self.states.all_finite()
            && self.outputs.all_finite()
            && self.controls.all_finite()
            && self.parameters.all_finite())
        {
            return Err(Error::Dataset("non-finite values in dataset arrays".into()));
        }
        for (stats, dim) in [
            (&self.stats.states, self.state_dim()),
            (&self.stats.outputs, self.output_dim()),
            (&self.stats.controls, self.control_dim()),
            (&self.stats.parameters, self.param_dim()),
        ] {
            if stats.channels() != dim {
                return Err(Error::Dataset("standardization stats channel mismatch".into()));
            }
            if stats.std.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Dataset("non-positive σ in standardization stats".into()));
            }
        }
        Ok(())
    }
}

/// How a per-sample quantity is drawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampling {
    /// Fixed default values, identical across samples.
    Fixed { values: Vec<f64> },
    /// Independent uniform draws per component.
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
}

impl Sampling {
    fn dim(&self) -> usize {
        match self {
            Sampling::Fixed { values } => values.len(),
            Sampling::Uniform { lo, .. } => lo.len(),
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Sampling::Fixed { values } => values.clone(),
            Sampling::Uniform { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| if h > l { rng.gen_range(*l..*h) } else { *l })
                .collect(),
        }
    }

    fn validate(&self, dim: usize, what: &str) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::Config(format!(
                "{what} sampling has dim {}, model expects {dim}",
                self.dim()
            )));
        }
        if let Sampling::Uniform { lo, hi } = self {
            if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                return Err(Error::Config(format!("{what} sampling bounds invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.76,
            test: 0.12,
            val: 0.12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub n_samples: usize,
    pub seed: u64,
    pub split: SplitFractions,
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    /// Leading transient dropped from the stored sequences, in seconds.
    pub drop_prefix: f64,
    pub solver: SolverConfig,
    pub x0: Sampling,
    pub params: Sampling,
    pub controls: Option<RrocsConfig>,
    pub retries: usize,
}

struct SampleResult {
    states: Vec<f64>,   // [points_kept × n_x]
    outputs: Vec<f64>,  // [points_kept × n_y]
    controls: Vec<f64>, // [points_kept × n_u]
    params: Vec<f64>,
}

/// Draw initial states, parameters and RROCS controls, simulate with the
/// ground-truth integrator, drop the transient prefix and assign splits.
/// Fully deterministic given the seed: sample `i` draws from stream-derived
/// generators indexed by `i`, independent of evaluation order.
pub fn generate_dataset(model: &dyn DynamicalModel, spec: &GenerationSpec) -> Result<TrajectoryDataset> {
    if spec.n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let frac_sum = spec.split.train + spec.split.test + spec.split.val;
    if (frac_sum - 1.0).abs() > 1e-9 || spec.split.train < 0.0 || spec.split.test < 0.0 || spec.split.val < 0.0 {
        return Err(Error::Config(format!("split fractions must partition 1.0, got {frac_sum}")));
    }
    spec.x0.validate(model.state_dim(), "initial state")?;
    spec.params.validate(model.param_dim(), "parameter")?;
    let n_u = model.control_dim();
    match (&spec.controls, n_u) {
        (Some(cfg), _) => cfg.validate(n_u)?,
        (None, 0) => {}
        (None, d) => {
            return Err(Error::Config(format!(
                "model has {d} control inputs but no RROCS config given"
            )))
        }
    }
    spec.solver.validate()?;

    let sim_grid = TimeGrid::new(spec.t0, spec.t_end, spec.dt)?;
    let drop_points = (spec.drop_prefix / spec.dt).round() as usize;
    if spec.drop_prefix < 0.0 || drop_points + 2 > sim_grid.points() {
        return Err(Error::Config(format!(
            "drop_prefix {} leaves fewer than 2 points",
            spec.drop_prefix
        )));
    }
    let kept = sim_grid.points() - drop_points;

    let n_x = model.state_dim();
    let n_y = model.output_dim();
    let n_p = model.param_dim();
    let retries = spec.retries.max(1);

    let results: Result<Vec<SampleResult>> = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut last_err = None;
            for attempt in 0..retries {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream((i as u64) * retries as u64 + attempt as u64);
                match simulate_sample(model, spec, &sim_grid, drop_points, &mut rng) {
                    Ok(res) => return Ok(res),
                    Err(e) => last_err = Some(e),
                }
            }
            Err(Error::Dataset(format!(
                "sample {i} failed after {retries} attempts: {}",
                last_err.unwrap()
            )))
        })
        .collect();
    let results = results?;

    let mut states = Array3::zeros(spec.n_samples, kept, n_x);
    let mut outputs = Array3::zeros(spec.n_samples, kept, n_y);
    let mut controls = Array3::zeros(spec.n_samples, kept, n_u);
    let mut parameters = Array2::zeros(spec.n_samples, n_p);
    for (i, res) in results.iter().enumerate() {
        for j in 0..kept {
            states.set_row(i, j, &res.states[j * n_x..(j + 1) * n_x]);
            if n_y > 0 {
                outputs.set_row(i, j, &res.outputs[j * n_y..(j + 1) * n_y]);
            }
            if n_u > 0 {
                controls.set_row(i, j, &res.controls[j * n_u..(j + 1) * n_u]);
            }
        }
        if n_p > 0 {
            parameters.set_row(i, &res.params);
        }
    }

    let splits = assign_splits(spec.n_samples, &spec.split, spec.seed);
    let grid = TimeGrid {
        t0: spec.t0 + drop_points as f64 * spec.dt,
        dt: spec.dt,
        intervals: sim_grid.intervals - drop_points,
    };

    let mut ds = TrajectoryDataset {
        states,
        outputs,
        controls,
        parameters,
        grid,
        splits,
        stats: DatasetStats {
            states: StandardStats::identity(n_x),
            outputs: StandardStats::identity(n_y),
            controls: StandardStats::identity(n_u),
            parameters: StandardStats::identity(n_p),
        },
        generator: serde_json::json!({
            "model": model.name(),
            "spec": spec,
        }),
    };
    ds.stats = compute_stats(&ds);
    ds.validate()?;
    Ok(ds)
}

fn simulate_sample(
    model: &dyn DynamicalModel,
    spec: &GenerationSpec,
    sim_grid: &TimeGrid,
    drop_points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleResult> {
    let n_x = model.state_dim();
    let n_y = model.output_dim();
    let n_u = model.control_dim();
    let points = sim_grid.points();

    let x0 = spec.x0.draw(rng);
    let params = spec.params.draw(rng);
    let mut controls_full = vec![0.0; points * n_u];
    if let Some(cfg) = &spec.controls {
        for j in 0..n_u {
            let ch = rrocs::sample_rrocs_channel(cfg, j, sim_grid, rng);
            for (k, v) in ch.iter().enumerate() {
                controls_full[k * n_u + j] = *v;
            }
        }
    }

    let empty: [f64; 0] = [];
    let mut rhs = |t: f64, x: &[f64], interval: usize| {
        let u = if n_u > 0 {
            &controls_full[interval * n_u..(interval + 1) * n_u]
        } else {
            &empty[..]
        };
        model.rhs(t, x, u, &params)
    };
    let integ = integrate(&mut rhs, &x0, sim_grid, &spec.solver).map_err(|f| f.to_error())?;

    let kept = points - drop_points;
    let mut states = vec![0.0; kept * n_x];
    let mut outputs = vec![0.0; kept * n_y];
    let mut controls = vec![0.0; kept * n_u];
    for j in 0..kept {
        let src = &integ.states[drop_points + j];
        states[j * n_x..(j + 1) * n_x].copy_from_slice(src);
        let u: &[f64] = if n_u > 0 {
            let base = (drop_points + j) * n_u;
            controls[j * n_u..(j + 1) * n_u].copy_from_slice(&controls_full[base..base + n_u]);
            &controls[j * n_u..(j + 1) * n_u]
        } else {
            &empty[..]
        };
        if n_y > 0 {
            let y = model.output(src, u, &params);
            outputs[j * n_y..(j + 1) * n_y].copy_from_slice(&y);
        }
    }

    Ok(SampleResult {
        states,
        outputs,
        controls,
        params,
    })
}

fn assign_splits(n: usize, fractions: &SplitFractions, seed: u64) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX); // keep split shuffling apart from sample streams
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (fractions.train * n as f64).round() as usize;
    let n_test = (fractions.test * n as f64).round() as usize;
    let mut splits = vec![Split::Val; n];
    for (rank, idx) in order.iter().enumerate() {
        splits[*idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_test.min(n - n_train) {
            Split::Test
        } else {
            Split::Val
        };
    }
    splits
}

/// Per-channel moments over the train split; population σ so standardized
/// train data has variance exactly 1.
fn compute_stats(ds: &TrajectoryDataset) -> DatasetStats {
    let train = ds.split_indices(Split::Train);
    let time_pooling = |arr: &Array3| -> StandardStats {
        let c = arr.c;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let count = (train.len() * arr.t) as f64;
        if c == 0 || count == 0.0 {
            return StandardStats::identity(c);
        }
        for &i in &train {
            for j in 0..arr.t {
                for (k, m) in mean.iter_mut().enumerate() {
                    *m += arr.get(i, j, k);
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for &i in &train {
            for j in 0..arr.t {
                for (k, v) in var.iter_mut().enumerate() {
                    let d = arr.get(i, j, k) - mean[k];
                    *v += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        StandardStats { mean, std }
    };

    let param_stats = {
        let c = ds.parameters.c;
        let count = train.len() as f64;
        if c == 0 || count == 0.0 {
            StandardStats::identity(c)
        } else {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for &i in &train {
                for (k, m) in mean.iter_mut().enumerate() {
                    *m += ds.parameters.get(i, k);
                }
            }
            for m in mean.iter_mut() {
                *m /= count;
            }
            for &i in &train {
                for (k, v) in var.iter_mut().enumerate() {
                    let d = ds.parameters.get(i, k) - mean[k];
                    *v += d * d;
                }
            }
            let std = var
                .iter()
                .map(|v| {
                    let s = (v / count).sqrt();
                    if s > 0.0 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect();
            StandardStats { mean, std }
        }
    };

    DatasetStats {
        states: time_pooling(&ds.states),
        outputs: time_pooling(&ds.outputs),
        controls: time_pooling(&ds.controls),
        parameters: param_stats,
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::physics::{KoopmanAnalyticModel, ShfModel};

    pub fn shf_spec(n_samples: usize, seed: u64) -> GenerationSpec {
        GenerationSpec {
            n_samples,
            seed,
            split: SplitFractions::default(),
            t0: 0.0,
            t_end: 1.2,
            dt: 0.002,
            drop_prefix: 0.2,
            solver: SolverConfig::dopri5(1e-6, 1e-8),
            x0: Sampling::Fixed {
                values: vec![300.0; 16],
            },
            params: Sampling::Fixed { values: vec![] },
            controls: Some(RrocsConfig {
                bounds: vec![(273.15, 473.15), (273.15, 473.15)],
                f_min_hz: 0.5,
                f_max_hz: 5.0,
            }),
            retries: 3,
        }
    }

    pub fn shf_dataset(n_samples: usize, seed: u64) -> TrajectoryDataset {
        generate_dataset(&ShfModel::default(), &shf_spec(n_samples, seed)).unwrap()
    }

    pub fn koopman_spec(n_samples: usize, seed: u64) -> GenerationSpec {
        GenerationSpec {
            n_samples,
            seed,
            split: SplitFractions::default(),
            t0: 0.0,
            t_end: 10.0,
            dt: 0.1,
            drop_prefix: 0.2,
            solver: SolverConfig::dopri5(1e-5, 1e-8),
            x0: Sampling::Uniform {
                lo: vec![-50.0, -50.0],
                hi: vec![50.0, 50.0],
            },
            params: Sampling::Fixed { values: vec![] },
            controls: None,
            retries: 3,
        }
    }

    pub fn koopman_dataset(n_samples: usize, seed: u64) -> TrajectoryDataset {
        generate_dataset(&KoopmanAnalyticModel::default(), &koopman_spec(n_samples, seed)).unwrap()
    }
}
