//! Moving-window subsequence sampling: every length-τ window of a training
//! sequence is a sample, assembled on the fly in standardized f64 form.

use diffcore::Tensor;
use rand::Rng;

use super::{Split, TrajectoryDataset};
use crate::{Error, Result};

/// A standardized batch of windows covering τ+1 grid points each.
/// Targets include the initial point (the decoder reconstructs it too).
pub struct WindowBatch {
    pub batch: usize,
    pub tau: usize,
    pub x0: Tensor,         // [B, n_x]
    pub params: Tensor,     // [B, n_p]
    pub controls: Vec<Tensor>, // τ+1 entries of [B, n_u]
    pub states: Vec<Tensor>,   // τ+1 entries of [B, n_x]
    pub outputs: Vec<Tensor>,  // τ+1 entries of [B, n_y]
}

/// Extract windows `(sample i, offset j)` covering points `j ..= j+τ`.
pub fn assemble_window_batch(ds: &TrajectoryDataset, picks: &[(usize, usize)], tau: usize) -> WindowBatch {
    let b = picks.len();
    let (n_x, n_y, n_u, n_p) = (ds.state_dim(), ds.output_dim(), ds.control_dim(), ds.param_dim());
    let points = tau + 1;

    let mut x0 = vec![0.0; b * n_x];
    let mut params = vec![0.0; b * n_p];
    let mut controls = vec![vec![0.0; b * n_u]; points];
    let mut states = vec![vec![0.0; b * n_x]; points];
    let mut outputs = vec![vec![0.0; b * n_y]; points];

    for (bi, (i, j)) in picks.iter().enumerate() {
        debug_assert!(j + tau < ds.points(), "window [{j}, {}] out of range", j + tau);
        for step in 0..points {
            let t_idx = j + step;
            for k in 0..n_x {
                states[step][bi * n_x + k] = ds.states.get(*i, t_idx, k);
            }
            for k in 0..n_y {
                outputs[step][bi * n_y + k] = ds.outputs.get(*i, t_idx, k);
            }
            for k in 0..n_u {
                controls[step][bi * n_u + k] = ds.controls.get(*i, t_idx, k);
            }
        }
        for k in 0..n_x {
            x0[bi * n_x + k] = ds.states.get(*i, *j, k);
        }
        for k in 0..n_p {
            params[bi * n_p + k] = ds.parameters.get(*i, k);
        }
    }

    ds.stats.states.standardize(&mut x0);
    ds.stats.parameters.standardize(&mut params);
    for step in 0..points {
        ds.stats.states.standardize(&mut states[step]);
        ds.stats.outputs.standardize(&mut outputs[step]);
        ds.stats.controls.standardize(&mut controls[step]);
    }

    WindowBatch {
        batch: b,
        tau,
        x0: Tensor::new(x0, &[b, n_x]),
        params: Tensor::new(params, &[b, n_p]),
        controls: controls.into_iter().map(|v| Tensor::new(v, &[b, n_u])).collect(),
        states: states.into_iter().map(|v| Tensor::new(v, &[b, n_x])).collect(),
        outputs: outputs.into_iter().map(|v| Tensor::new(v, &[b, n_y])).collect(),
    }
}

/// Stream of all τ-windows of one split, plus random batch picks for
/// training. With T intervals per sequence there are T − τ windows each.
pub struct WindowSampler<'a> {
    ds: &'a TrajectoryDataset,
    pub tau: usize,
    pub sequence_indices: Vec<usize>,
}

impl<'a> WindowSampler<'a> {
    pub fn new(ds: &'a TrajectoryDataset, split: Split, tau: usize) -> Result<WindowSampler<'a>> {
        let t_intervals = ds.grid.intervals;
        if tau == 0 || tau >= t_intervals {
            return Err(Error::Config(format!(
                "training sequence length τ = {tau} must satisfy 1 <= τ < T = {t_intervals}"
            )));
        }
        let sequence_indices = ds.split_indices(split);
        if sequence_indices.is_empty() {
            return Err(Error::Dataset(format!("split {split:?} is empty")));
        }
        Ok(WindowSampler {
            ds,
            tau,
            sequence_indices,
        })
    }

    pub fn windows_per_sequence(&self) -> usize {
        self.ds.grid.intervals - self.tau
    }

    pub fn total_windows(&self) -> usize {
        self.windows_per_sequence() * self.sequence_indices.len()
    }

    /// Lazy enumeration of every (sample, offset) pick.
    pub fn iter_picks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let per_seq = self.windows_per_sequence();
        self.sequence_indices
            .iter()
            .flat_map(move |&i| (0..per_seq).map(move |j| (i, j)))
    }

    pub fn random_picks(&self, rng: &mut impl Rng, batch: usize) -> Vec<(usize, usize)> {
        let per_seq = self.windows_per_sequence();
        (0..batch)
            .map(|_| {
                let si = self.sequence_indices[rng.gen_range(0..self.sequence_indices.len())];
                let j = rng.gen_range(0..per_seq);
                (si, j)
            })
            .collect()
    }

    pub fn batch(&self, picks: &[(usize, usize)]) -> WindowBatch {
        assemble_window_batch(self.ds, picks, self.tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_support::shf_dataset;

    #[test]
    fn window_count_is_t_minus_tau() {
        let ds = shf_dataset(6, 9);
        // T = 500 intervals
        let sampler = WindowSampler::new(&ds, Split::Train, 50).unwrap();
        assert_eq!(sampler.windows_per_sequence(), 450);
        assert_eq!(
            sampler.total_windows(),
            450 * ds.split_indices(Split::Train).len()
        );
        assert_eq!(sampler.iter_picks().count(), sampler.total_windows());
    }

    #[test]
    fn tau_of_t_minus_one_yields_single_window() {
        let ds = shf_dataset(4, 9);
        let sampler = WindowSampler::new(&ds, Split::Train, ds.grid.intervals - 1).unwrap();
        assert_eq!(sampler.windows_per_sequence(), 1);
    }

    #[test]
    fn tau_at_or_above_t_rejected() {
        let ds = shf_dataset(4, 9);
        assert!(WindowSampler::new(&ds, Split::Train, ds.grid.intervals).is_err());
        assert!(WindowSampler::new(&ds, Split::Train, ds.grid.intervals + 5).is_err());
    }

    #[test]
    fn window_zero_is_the_sequence_prefix() {
        let ds = shf_dataset(4, 9);
        let sampler = WindowSampler::new(&ds, Split::Train, 10).unwrap();
        let seq = sampler.sequence_indices[0];
        let batch = sampler.batch(&[(seq, 0)]);
        // x0 equals the standardized first state row
        let mut expect: Vec<f64> = (0..ds.state_dim()).map(|k| ds.states.get(seq, 0, k)).collect();
        ds.stats.states.standardize(&mut expect);
        for (a, b) in batch.x0.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // and the step-5 target equals the standardized row at t index 5
        let mut expect5: Vec<f64> = (0..ds.state_dim()).map(|k| ds.states.get(seq, 5, k)).collect();
        ds.stats.states.standardize(&mut expect5);
        for (a, b) in batch.states[5].data().iter().zip(&expect5) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
