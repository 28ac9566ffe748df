//! Group-relative policy optimization of the composer through latent memory.
//!
//! Rollouts are sampled under a frozen snapshot of the composer. Every token
//! of trajectory `i` carries that trajectory's group-standardized reward, and
//! the clipped surrogate is averaged over all generated tokens of the batch
//! with a single normalizer. Gradients reach only the composer.

pub mod gradcheck;
mod rollout;
mod trainer;

pub use rollout::{group_surrogate, importance_ratios, sample_group, teacher_forced_logprobs, RolloutGroup};
pub use trainer::{evaluate, train_loop, EvalReport, StepMetrics, TrainSetup, TrainSummary, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    /// Added to the group standard deviation when standardizing rewards.
    pub adv_eps: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub train_temperature: f64,
    pub eval_temperature: f64,
    pub epochs_per_batch: usize,
    /// Groups per optimizer step.
    pub macro_batch: usize,
    /// Must stay 0: the KL term is not implemented.
    pub kl_weight: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
    /// Evaluate every this many steps (and before the first and after the
    /// last step); 0 disables evaluation.
    pub eval_every: usize,
    /// Episodes evaluated between bank updates.
    pub eval_wave: usize,
    /// Save a composer checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for LmpoConfig {
    fn default() -> Self {
        LmpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            adv_eps: 1e-8,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            train_temperature: 1.0,
            eval_temperature: 0.0,
            epochs_per_batch: 1,
            macro_batch: 32,
            kl_weight: 0.0,
            total_steps: 200,
            warmup_ratio: 0.1,
            eval_every: 50,
            eval_wave: 16,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl LmpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if self.adv_eps <= 0.0 {
            return bad("adv_eps must be positive");
        }
        if self.kl_weight != 0.0 {
            return bad("kl_weight must be 0: the KL-penalized objective is not supported");
        }
        if self.macro_batch == 0 || self.epochs_per_batch == 0 || self.eval_wave == 0 {
            return bad("macro_batch, epochs_per_batch and eval_wave must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if self.learning_rate <= 0.0 || self.grad_clip_norm <= 0.0 {
            return bad("learning_rate and grad_clip_norm must be positive");
        }
        if self.train_temperature < 0.0 || self.eval_temperature < 0.0 {
            return bad("temperatures must be non-negative");
        }
        Ok(())
    }
}

/// `(R_i − mean) / (std + adv_eps)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64], adv_eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::contract("advantages need a group of at least 2"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + adv_eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`, the per-token quantity to maximize.
pub fn clipped_token_loss(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Per-token ratios of each trajectory in one group, with its advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ratios: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
}

impl TokenBatch {
    pub fn token_count(&self) -> usize {
        self.ratios.iter().map(Vec::len).sum()
    }
}

/// Negated token-level surrogate: the clipped terms of every token of every
/// group, summed and divided once by the total token count.
pub fn lmpo_objective(batches: &[TokenBatch], clip_eps: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        if b.ratios.len() != b.advantages.len() {
            return Err(Error::contract("one advantage per trajectory required"));
        }
        for (rs, &a) in b.ratios.iter().zip(&b.advantages) {
            for &r in rs {
                total += clipped_token_loss(r, a, clip_eps);
            }
            tokens += rs.len();
        }
    }
    if tokens == 0 {
        return Err(Error::contract("objective over zero generated tokens"));
    }
    Ok(-total / tokens as f64)
}

/// Independent stream seed for `(base, stream)` (splitmix64 finalizer).
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Whether the clip range excludes `ratio`.
pub fn is_clipped(ratio: f64, clip_eps: f64) -> bool {
    (ratio - 1.0).abs() > clip_eps
}
