//! Next-token pretraining of the backbone on task-format lines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::Binding;
use super::model::{Backbone, BackboneVars, TransformerConfig};
use super::tokenizer::EOS;
use crate::error::{Error, Result};
use crate::optim::{clip_coefficient, global_norm, AdamW, AdamWConfig, WarmupSchedule};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// One training sequence. `score[i]` marks whether predicting `ids[i+1]`
/// contributes to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLine {
    pub ids: Vec<usize>,
    pub score: Vec<bool>,
    /// Continuous rows inserted before `ids[slot.at]`.
    pub slot: Option<SoftSlot>,
}

/// Input rows that are weighted sums of token embeddings, standing where
/// latent memory goes at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSlot {
    pub at: usize,
    /// `(token, weight)` terms of each row.
    pub rows: Vec<Vec<(usize, f32)>>,
}

impl TrainLine {
    /// `context ++ slot ++ target ++ EOS`; only `target` and `EOS` are scored.
    /// `slot` rows sit where latent memory goes at inference time.
    pub fn new(context: &[usize], slot: &[usize], target: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(context.len() + slot.len() + target.len() + 1);
        ids.extend_from_slice(context);
        ids.extend_from_slice(slot);
        ids.extend_from_slice(target);
        ids.push(EOS);
        let first_scored = context.len() + slot.len();
        let score = (0..ids.len() - 1).map(|i| i + 1 >= first_scored).collect();
        TrainLine { ids, score, slot: None }
    }

    /// `context ++ rows ++ target ++ EOS` with continuous slot rows; only
    /// `target` and `EOS` are scored.
    pub fn with_soft_slot(context: &[usize], rows: Vec<Vec<(usize, f32)>>, target: &[usize]) -> Self {
        let mut line = TrainLine::new(context, &[], target);
        if !rows.is_empty() {
            line.slot = Some(SoftSlot {
                at: context.len(),
                rows,
            });
        }
        line
    }

    /// Every next-token prediction is scored.
    pub fn dense(ids: Vec<usize>) -> Self {
        let score = vec![true; ids.len().saturating_sub(1)];
        TrainLine { ids, score, slot: None }
    }

    /// Rows the backbone sees: tokens plus slot rows.
    pub fn len(&self) -> usize {
        self.ids.len() + self.slot.as_ref().map_or(0, |s| s.rows.len())
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Mean cross-entropy of a line's scored targets.
pub fn line_loss<S: Scalar>(model: &Backbone<S>, tape: &Tape<S>, vars: &BackboneVars, line: &TrainLine) -> Result<Var> {
    let Some(slot) = &line.slot else {
        return model.masked_lm_loss(tape, vars, &line.ids, &line.score);
    };
    let (at, n) = (slot.at, line.ids.len());
    if at == 0 || at >= n || slot.rows.is_empty() {
        return Err(Error::contract("soft slot must sit between context and target"));
    }
    let v = model.config.vocab_size;
    let mut weights = Tensor::<S>::zeros(&[slot.rows.len(), v]);
    for (r, terms) in slot.rows.iter().enumerate() {
        for &(id, w) in terms {
            if id >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: id,
                    bound: v,
                });
            }
            weights.data_mut()[r * v + id] += S::from_f64_lossy(w as f64);
        }
    }
    let w = tape.constant(weights);
    let memory = tape.matmul(w, vars.tok_embed)?;
    let h = model.hidden_states(tape, vars, &line.ids[..at], Some(memory), &line.ids[at..n - 1])?;
    // the first target is predicted from the last slot row
    let first = at + slot.rows.len() - 1;
    let rows: Vec<usize> = (at..n).filter(|&j| line.score[j - 1]).map(|j| first + j - at).collect();
    if rows.is_empty() {
        return Err(Error::contract("no scored positions"));
    }
    let targets: Vec<usize> = (at..n).filter(|&j| line.score[j - 1]).map(|j| line.ids[j]).collect();
    let picked = tape.gather(h, &rows)?;
    let logits = model.logits(tape, vars, picked)?;
    tape.cross_entropy(logits, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 3e-3,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PretrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

impl PretrainReport {
    /// Means over consecutive non-overlapping windows.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks(window)
            .filter(|c| c.len() == window)
            .map(|c| c.iter().sum::<f64>() / window as f64)
            .collect()
    }
}

/// Mean per-line loss over `lines` under frozen parameters.
pub fn evaluate_loss(model: &Backbone<f32>, lines: &[TrainLine]) -> Result<f64> {
    if lines.is_empty() {
        return Err(Error::contract("no lines to evaluate"));
    }
    let losses: Vec<Result<f64>> = lines
        .par_iter()
        .map(|line| {
            let tape = Tape::new();
            let vars = model.bind(&tape, Binding::Frozen);
            let loss = line_loss(model, &tape, &vars, line)?;
            Ok(tape.value(loss).item() as f64)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / lines.len() as f64)
}

/// Trains `model` in place on `lines`.
pub fn pretrain_backbone(
    model: &mut Backbone<f32>,
    lines: &[TrainLine],
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    if lines.is_empty() || config.batch_size == 0 {
        return Err(Error::contract("pretraining needs lines and a positive batch size"));
    }
    for (i, line) in lines.iter().enumerate() {
        if line.len() > model.config.max_seq_len {
            return Err(Error::validation(format!(
                "corpus line {i} has {} rows, max_seq_len is {}",
                line.len(),
                model.config.max_seq_len
            )));
        }
    }
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::<f32>::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &sizes,
    );
    let schedule = WarmupSchedule::new(config.lr, config.steps, config.warmup_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut cursor = lines.len();
    let mut report = PretrainReport::default();

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let frozen: &Backbone<f32> = model;
        let results: Vec<Result<(f64, Vec<Option<Tensor<f32>>>)>> = batch
            .par_iter()
            .map(|&li| {
                let tape = Tape::new();
                let vars = frozen.bind(&tape, Binding::Trainable);
                let line = &lines[li];
                let loss = line_loss(frozen, &tape, &vars, line)?;
                let value = tape.value(loss).item() as f64;
                let mut grads = tape.backward(loss)?;
                let g = vars.flat().into_iter().map(|v| grads.take(v)).collect();
                Ok((value, g))
            })
            .collect();

        let mut total = 0.0;
        let mut sum: Vec<Option<Tensor<f32>>> = vec![None; sizes.len()];
        for r in results {
            let (loss, grads) = r?;
            total += loss;
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign_tensor(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        for g in sum.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let loss = total / batch.len() as f64;
        let refs: Vec<Option<&Tensor<f32>>> = sum.iter().map(|g| g.as_ref()).collect();
        let norm = global_norm(&refs);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged(format!(
                "pretraining step {step}: loss {loss}, gradient norm {norm}"
            )));
        }
        let coef = clip_coefficient(norm, config.grad_clip_norm);
        let mut params: Vec<_> = model.named_params_mut().into_iter().map(|(_, p)| p).collect();
        opt.step(&mut params, &refs, schedule.lr(step), coef)?;
        report.losses.push(loss);
        if step % 100 == 0 || step + 1 == config.steps {
            log::info!("pretrain step {step}: loss {loss:.4}");
        }
    }
    Ok(report)
}

/// Default configuration sized for quick tests.
pub fn tiny_config(max_seq_len: usize) -> TransformerConfig {
    TransformerConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        max_seq_len,
        vocab_size: super::tokenizer::VOCAB_SIZE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tokenizer::{Tokenizer, BOS};

    #[test]
    fn train_line_scores_target_only() {
        let line = TrainLine::new(&[BOS, 10], &[20, 21], &[30]);
        assert_eq!(line.ids, vec![BOS, 10, 20, 21, 30, EOS]);
        assert_eq!(line.score, vec![false, false, false, true, true]);
    }

    #[test]
    fn single_line_is_memorized_deterministically() {
        let t = Tokenizer;
        let mut ids = vec![BOS];
        ids.extend(t.encode("abc>xyz"));
        ids.push(EOS);
        let lines = vec![TrainLine::dense(ids)];
        let cfg = PretrainConfig {
            steps: 150,
            batch_size: 1,
            lr: 1e-2,
            warmup_ratio: 0.1,
            seed: 3,
            ..PretrainConfig::default()
        };
        let mut a = Backbone::<f32>::init(tiny_config(16), 1).unwrap();
        let mut b = a.clone();
        let report = pretrain_backbone(&mut a, &lines, &cfg).unwrap();
        pretrain_backbone(&mut b, &lines, &cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(report.losses[0] > 1.0);
        let held_out = evaluate_loss(&a, &lines).unwrap();
        assert!(held_out < 0.05, "loss {held_out}");
    }
}
