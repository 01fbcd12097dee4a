use crate::tensor::Tensor;
use crate::{DiffError, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay: applied directly to parameters, not through
    /// the gradient, so the moment estimates stay clean.
    pub weight_decay: f64,
    /// Global L2 gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            clip_norm: 2.0,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment arrays.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> AdamState {
        AdamState {
            cfg,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.m.len()
    }

    /// One update over matched (param, grad) lists. Clips the global grad
    /// norm before the moment update; weight decay acts on the parameters
    /// directly. Rejects non-finite gradients with the offending index.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter set");

        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(DiffError::NonFinite {
                    context: format!("gradient slot {i} in adam_step"),
                });
            }
        }

        let mut scale = 1.0;
        if self.cfg.clip_norm > 0.0 {
            let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
            if norm > self.cfg.clip_norm {
                scale = self.cfg.clip_norm / norm;
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for ((pi, gi_raw), (mi, vi)) in pd.iter_mut().zip(g.data()).zip(md.iter_mut().zip(vd.iter_mut())) {
                let gi = gi_raw * scale;
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                *pi -= self.cfg.lr * self.cfg.weight_decay * *pi;
            }
        }
        Ok(())
    }

    /// Flatten the moment arrays for checkpointing, named by slot index.
    pub fn named_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.m.len() * 2);
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("adam.m{i}"), m.clone()));
            out.push((format!("adam.v{i}"), v.clone()));
        }
        out
    }

    pub fn restore_state(&mut self, step: u64, source: &mut dyn FnMut(&str) -> Option<Tensor>) {
        self.step = step;
        for i in 0..self.m.len() {
            if let Some(t) = source(&format!("adam.m{i}")) {
                self.m[i] = t;
            }
            if let Some(t) = source(&format!("adam.v{i}")) {
                self.v[i] = t;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> Tensor {
        Tensor::vector(vec![value])
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // g=1, lr=1e-3: m̂=1, v̂=1, Δθ = 1e-3/(1+1e-8)
        let cfg = AdamConfig {
            weight_decay: 0.0,
            clip_norm: 0.0,
            ..AdamConfig::default()
        };
        let mut p = single_param(0.0);
        let mut state = AdamState::new(cfg, std::slice::from_ref(&p));
        state.step(&mut [&mut p], &[single_param(1.0)]).unwrap();
        let delta = -p.data()[0];
        assert!((delta - 9.99999995e-4).abs() < 1e-10, "delta = {delta:e}");
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param_unchanged() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = single_param(1.25);
        let mut state = AdamState::new(cfg, std::slice::from_ref(&p));
        state.step(&mut [&mut p], &[single_param(0.0)]).unwrap();
        assert_eq!(p.data()[0], 1.25);
    }

    #[test]
    fn global_norm_clip_halves_effective_gradient() {
        // Two slots with grads (4, 0): norm 4, clip 2 => scale 0.5.
        let cfg = AdamConfig {
            clip_norm: 2.0,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p0 = single_param(0.0);
        let mut p1 = single_param(0.0);
        let params = vec![p0.clone(), p1.clone()];
        let mut state = AdamState::new(cfg.clone(), &params);
        state
            .step(&mut [&mut p0, &mut p1], &[single_param(4.0), single_param(0.0)])
            .unwrap();

        // Reference: unclipped run with gradient already halved.
        let mut q0 = single_param(0.0);
        let mut q1 = single_param(0.0);
        let mut ref_state = AdamState::new(
            AdamConfig {
                clip_norm: 0.0,
                ..cfg
            },
            &params,
        );
        ref_state
            .step(&mut [&mut q0, &mut q1], &[single_param(2.0), single_param(0.0)])
            .unwrap();
        assert_eq!(p0.data()[0], q0.data()[0]);
        assert_eq!(p1.data()[0], q1.data()[0]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = single_param(0.0);
        let mut state = AdamState::new(AdamConfig::default(), std::slice::from_ref(&p));
        let err = state.step(&mut [&mut p], &[single_param(f64::NAN)]).unwrap_err();
        assert!(err.to_string().contains("slot 0"));
    }

    #[test]
    fn step_counter_strictly_increases() {
        let mut p = single_param(0.0);
        let mut state = AdamState::new(AdamConfig::default(), std::slice::from_ref(&p));
        for expect in 1..=5u64 {
            state.step(&mut [&mut p], &[single_param(0.1)]).unwrap();
            assert_eq!(state.step, expect);
        }
    }
}
