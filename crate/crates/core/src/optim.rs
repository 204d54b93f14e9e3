//! AdamW with per-group learning-rate multipliers, cosine decay and
//! global-norm gradient clipping.

use crate::error::{LapoError, Result};
use crate::params::{MomentState, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    /// One update. `lr_of(i)` gives the learning rate of group `i`.
    pub fn step(
        &self,
        params: &mut PolicyParams,
        state: &mut MomentState,
        grads: &[Vec<f32>],
        lr_of: impl Fn(usize) -> f64,
    ) -> Result<()> {
        if grads.len() != params.len() || state.m.len() != params.len() {
            return Err(LapoError::Invalid("gradient/parameter group count mismatch".into()));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let lr = lr_of(i);
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, w) in tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i][j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                let wf = *w as f64;
                *w = (wf - lr * (upd + self.weight_decay * wf)) as f32;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `peak` to `min_ratio * peak` over `total` steps.
pub fn cosine_lr(step: usize, total: usize, peak: f64, min_ratio: f64) -> f64 {
    if total <= 1 {
        return peak;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    let floor = peak * min_ratio;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = (*x as f64 * s) as f32;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::PolicyDims;
    use proptest::prelude::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0.1), 1e-3);
        assert!((cosine_lr(99, 100, 1e-3, 0.1) - 1e-4).abs() < 1e-15);
        assert!((cosine_lr(500, 100, 1e-3, 0.1) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = PolicyParams::init(PolicyDims::default(), 0).unwrap();
        let before = p.tensors()[1].data()[0] as f64;
        let mut st = MomentState::zeros(&p);
        let grads: Vec<Vec<f32>> = p.tensors().iter().map(|t| vec![0.5; t.numel()]).collect();
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut p, &mut st, &grads, |_| 1e-3).unwrap();
        let after = p.tensors()[1].data()[0] as f64;
        assert!((before - after - 1e-3).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(xs in proptest::collection::vec(-100.0f32..100.0, 1..64), max in 0.1f64..20.0) {
            let mut g = vec![xs];
            clip_global_norm(&mut g, max);
            prop_assert!(global_norm(&g) <= max * (1.0 + 1e-6) + 1e-6);
        }
    }
}
