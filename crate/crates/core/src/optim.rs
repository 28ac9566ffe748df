//! AdamW with decoupled weight decay, linear warmup and global-norm clipping.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to rank-2 parameters only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear ramp from 0 to the base rate over the first `warmup` steps, then
/// constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        WarmupSchedule {
            base_lr,
            warmup_steps: (total_steps as f64 * warmup_ratio).ceil() as usize,
        }
    }

    /// Rate for the zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.base_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.base_lr
        }
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm<S: Scalar>(grads: &[Option<&Tensor<S>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Multiplier that brings `norm` down to `max_norm`, or 1.
pub fn clip_coefficient(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / (norm + 1e-6)
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    pub config: AdamWConfig,
    pub steps: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            steps: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// One update. Missing gradients count as zero. `grad_scale` multiplies
    /// every gradient first (used for norm clipping).
    pub fn step(
        &mut self,
        params: &mut [&mut Arc<Tensor<S>>],
        grads: &[Option<&Tensor<S>>],
        lr: f64,
        grad_scale: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let b1 = S::from_f64_lossy(c.beta1);
        let b2 = S::from_f64_lossy(c.beta2);
        let one = S::one();
        let step_size = S::from_f64_lossy(lr / bc1);
        let bc2_sqrt = S::from_f64_lossy(bc2.sqrt());
        let eps = S::from_f64_lossy(c.eps);
        let scale = S::from_f64_lossy(grad_scale);
        for (i, p) in params.iter_mut().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(Error::contract(format!("optimizer slot {i} size mismatch")));
            }
            let decay = if p.rank() == 2 {
                S::from_f64_lossy(lr * c.weight_decay)
            } else {
                S::zero()
            };
            let data = Arc::make_mut(p).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..data.len() {
                let g = grads[i].map_or(S::zero(), |g| g.data()[k] * scale);
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let denom = v[k].sqrt() / bc2_sqrt + eps;
                data[k] -= decay * data[k];
                data[k] -= step_size * m[k] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramps_then_holds() {
        let s = WarmupSchedule::new(1.0, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert_eq!(s.lr(50), 1.0);
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let mut w = Arc::new(Tensor::<f64>::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]).unwrap());
        let mut b = Arc::new(Tensor::<f64>::from_vec(vec![3.0, -1.0]));
        let before_w = (*w).clone();
        let before_b = (*b).clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &[4, 2]);
        opt.step(&mut [&mut w, &mut b], &[None, None], 1e-3, 1.0).unwrap();
        for (a, o) in w.data().iter().zip(before_w.data()) {
            assert!((a - o * (1.0 - 1e-3 * 0.01)).abs() < 1e-15);
        }
        assert_eq!(b.data(), before_b.data());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr * g/|g| (plus eps)
        let mut b = Arc::new(Tensor::<f64>::from_vec(vec![0.0, 0.0]));
        let g = Tensor::from_vec(vec![0.3, -2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &[2]);
        opt.step(&mut [&mut b], &[Some(&g)], 0.01, 1.0).unwrap();
        assert!((b.data()[0] + 0.01).abs() < 1e-8);
        assert!((b.data()[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn clipping_caps_norm() {
        let g = Tensor::<f64>::from_vec(vec![3.0, 4.0]);
        let n = global_norm(&[Some(&g), None]);
        assert_eq!(n, 5.0);
        assert!((clip_coefficient(n, 1.0) * n - 1.0).abs() < 1e-6);
        assert_eq!(clip_coefficient(0.5, 1.0), 1.0);
    }
}
