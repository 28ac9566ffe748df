use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::rollout::{group_surrogate, sample_group, RolloutGroup};
use super::{derive_seed, LmpoConfig};
use crate::bank::ExperienceBank;
use crate::checkpoint;
use crate::composer::Composer;
use crate::error::{Error, Result};
use crate::lm::{Backbone, Binding};
use crate::mas::{run_episode, Episode, EpisodeOptions, MasSystem, TaskFamily, TaskInstance};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::optim::{clip_coefficient, global_norm, AdamW, AdamWConfig, WarmupSchedule};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub clip_frac: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub tokens: usize,
}

impl StepMetrics {
    pub fn row(&self) -> MetricsRow {
        MetricsRow {
            step: self.step,
            mean_reward: Some(self.mean_reward),
            eval_reward: None,
            loss: Some(self.loss),
            clip_frac: Some(self.clip_frac),
            grad_norm: Some(self.grad_norm),
            tokens: Some(self.tokens),
        }
    }
}

/// Optimizer state for the composer.
pub struct Trainer {
    pub config: LmpoConfig,
    optimizer: AdamW<f32>,
    schedule: WarmupSchedule,
    /// Updates applied so far.
    pub step: usize,
}

impl Trainer {
    pub fn new(config: LmpoConfig, composer: &Composer<f32>) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = composer.trainable_parameters().iter().map(|(_, t)| t.numel()).collect();
        let optimizer = AdamW::new(
            AdamWConfig {
                lr: config.learning_rate,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.adam_eps,
                weight_decay: config.weight_decay,
            },
            &sizes,
        );
        Ok(Trainer {
            config,
            optimizer,
            schedule: WarmupSchedule::new(config.learning_rate, config.total_steps, config.warmup_ratio),
            step: 0,
        })
    }

    /// One clipped AdamW update of the composer from the token-level loss
    /// over `groups`.
    pub fn train_step(
        &mut self,
        system: &MasSystem,
        backbone: &Backbone<f32>,
        composer: &mut Composer<f32>,
        groups: &[RolloutGroup],
    ) -> Result<StepMetrics> {
        let tokens: usize = groups.iter().map(|g| g.token_count).sum();
        if groups.is_empty() || tokens == 0 {
            return Err(Error::contract("train step over zero generated tokens"));
        }
        let eps = self.config.clip_eps;
        let norm = -1.0 / tokens as f32;
        let current: &Composer<f32> = composer;
        type GroupGrads = (f64, usize, Vec<Option<Tensor<f32>>>);
        let results: Vec<Result<GroupGrads>> = groups
            .par_iter()
            .map(|g| {
                let tape = Tape::new();
                let bvars = backbone.bind(&tape, Binding::Frozen);
                let cvars = current.bind(&tape, Binding::Trainable);
                let s = group_surrogate(&tape, backbone, &bvars, current, &cvars, system, g, eps)?;
                let loss = tape.scale(s.sum, norm);
                let sum = tape.value(s.sum).item() as f64;
                let mut grads = tape.backward(loss)?;
                let flat = cvars.flat().into_iter().map(|v| grads.take(v)).collect();
                Ok((sum, s.clipped, flat))
            })
            .collect();

        let mut surrogate = 0.0;
        let mut clipped = 0;
        let mut sum: Vec<Option<Tensor<f32>>> = Vec::new();
        for r in results {
            let (s, c, grads) = r?;
            surrogate += s;
            clipped += c;
            if sum.is_empty() {
                sum = grads;
                continue;
            }
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign_tensor(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let loss = -surrogate / tokens as f64;
        let refs: Vec<Option<&Tensor<f32>>> = sum.iter().map(|g| g.as_ref()).collect();
        let grad_norm = global_norm(&refs);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged(format!(
                "lmpo step {}: loss {loss}, gradient norm {grad_norm}, {} groups, {tokens} tokens",
                self.step,
                groups.len()
            )));
        }
        let coef = clip_coefficient(grad_norm, self.config.grad_clip_norm);
        let mut params: Vec<_> = composer.trainable_parameters_mut().into_iter().map(|(_, p)| p).collect();
        self.optimizer.step(&mut params, &refs, self.schedule.lr(self.step), coef)?;
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let metrics = StepMetrics {
            step: self.step,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            loss,
            clip_frac: clipped as f64 / tokens as f64,
            grad_norm,
            tokens,
        };
        self.step += 1;
        Ok(metrics)
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_reward: f64,
    /// `(family, mean reward, episodes)` in first-seen order.
    pub per_family: Vec<(TaskFamily, f64, usize)>,
    pub episodes: Vec<Episode>,
    /// Trajectories the bank accepted during evaluation.
    pub appended: usize,
}

/// Runs `tasks` in waves of `wave` episodes against a fixed bank state, then
/// offers each wave's trajectories to the bank before the next wave.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    system: &MasSystem,
    backbone: &Backbone<f32>,
    composer: Option<&Composer<f32>>,
    mut bank: Option<&mut ExperienceBank>,
    tasks: &[TaskInstance],
    opts: &EpisodeOptions,
    wave: usize,
    seed: u64,
) -> Result<EvalReport> {
    if tasks.is_empty() || wave == 0 {
        return Err(Error::contract("evaluation needs tasks and a positive wave size"));
    }
    let mut episodes = Vec::with_capacity(tasks.len());
    let mut appended = 0;
    for (w, chunk) in tasks.chunks(wave).enumerate() {
        let frozen = bank.as_deref();
        let results: Vec<Result<Episode>> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let s = derive_seed(seed, (w * wave + i) as u64);
                run_episode(system, backbone, composer, frozen, task, opts, s)
            })
            .collect();
        let wave_eps: Vec<Episode> = results.into_iter().collect::<Result<_>>()?;
        if let Some(bank) = bank.as_deref_mut() {
            for e in &wave_eps {
                appended += bank.append(e.trajectory.clone())? as usize;
            }
        }
        episodes.extend(wave_eps);
    }
    let mut per_family: Vec<(TaskFamily, f64, usize)> = Vec::new();
    for (task, e) in tasks.iter().zip(&episodes) {
        match per_family.iter_mut().find(|(f, _, _)| *f == task.family) {
            Some(entry) => {
                entry.1 += e.reward;
                entry.2 += 1;
            }
            None => per_family.push((task.family, e.reward, 1)),
        }
    }
    for entry in &mut per_family {
        entry.1 /= entry.2 as f64;
    }
    let mean_reward = episodes.iter().map(|e| e.reward).sum::<f64>() / episodes.len() as f64;
    Ok(EvalReport {
        mean_reward,
        per_family,
        episodes,
        appended,
    })
}

/// Everything the training loop reads but does not modify.
pub struct TrainSetup<'a> {
    pub system: &'a MasSystem,
    pub backbone: &'a Backbone<f32>,
    pub train_tasks: &'a [TaskInstance],
    pub eval_tasks: &'a [TaskInstance],
    pub config: LmpoConfig,
    /// Retrieval and length settings; temperatures come from `config`.
    pub episode: EpisodeOptions,
    /// Composer checkpoints are written here when set.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub steps: usize,
    /// `(step, eval reward)` in order.
    pub evals: Vec<(usize, f64)>,
    pub skipped_groups: usize,
    pub backbone_fingerprint: String,
}

impl TrainSummary {
    pub fn initial_eval(&self) -> Option<f64> {
        self.evals.first().map(|e| e.1)
    }

    pub fn final_eval(&self) -> Option<f64> {
        self.evals.last().map(|e| e.1)
    }
}

/// Snapshot, sample `macro_batch` groups, update; evaluate and checkpoint on
/// schedule. Evaluation episodes are offered to the bank; training rollouts
/// are not.
pub fn train_loop(
    setup: &TrainSetup<'_>,
    composer: &mut Composer<f32>,
    bank: &mut ExperienceBank,
    metrics: &mut MetricsWriter,
) -> Result<TrainSummary> {
    let config = setup.config;
    config.validate()?;
    if setup.train_tasks.is_empty() {
        return Err(Error::contract("training needs at least one task"));
    }
    if let Some(dir) = &setup.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fingerprint = setup.backbone.fingerprint();
    let mut trainer = Trainer::new(config, composer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval_opts = EpisodeOptions {
        temperature: config.eval_temperature,
        ..setup.episode
    };
    let mut summary = TrainSummary::default();
    let run_eval = |step: usize, composer: &Composer<f32>, bank: &mut ExperienceBank| -> Result<f64> {
        let seed = derive_seed(config.seed ^ 0x5eed_e7a1, step as u64);
        let report = evaluate(
            setup.system,
            setup.backbone,
            Some(composer),
            Some(bank),
            setup.eval_tasks,
            &eval_opts,
            config.eval_wave,
            seed,
        )?;
        log::info!("eval at step {step}: reward {:.4}", report.mean_reward);
        Ok(report.mean_reward)
    };
    let evals_on = config.eval_every > 0 && !setup.eval_tasks.is_empty();
    if evals_on {
        let r = run_eval(0, composer, bank)?;
        metrics.push(MetricsRow::eval(0, r))?;
        summary.evals.push((0, r));
    }

    for step in 0..config.total_steps {
        let snapshot = composer.snapshot();
        let tasks: Vec<&TaskInstance> = (0..config.macro_batch)
            .map(|_| &setup.train_tasks[rng.gen_range(0..setup.train_tasks.len())])
            .collect();
        let step_seed = derive_seed(config.seed, step as u64);
        let frozen_bank: &ExperienceBank = bank;
        let sampled: Vec<Result<Option<RolloutGroup>>> = tasks
            .par_iter()
            .enumerate()
            .map(|(g, task)| {
                sample_group(
                    setup.system,
                    setup.backbone,
                    &snapshot,
                    frozen_bank,
                    task,
                    &config,
                    &setup.episode,
                    derive_seed(step_seed, g as u64),
                )
            })
            .collect();
        let mut groups = Vec::with_capacity(sampled.len());
        for g in sampled {
            match g? {
                Some(g) => groups.push(g),
                None => summary.skipped_groups += 1,
            }
        }
        if groups.is_empty() {
            log::warn!("step {step}: every group was skipped");
            continue;
        }
        for _ in 0..config.epochs_per_batch {
            let m = trainer.train_step(setup.system, setup.backbone, composer, &groups)?;
            log::debug!(
                "step {}: reward {:.3} loss {:.5} grad {:.4}",
                m.step,
                m.mean_reward,
                m.loss,
                m.grad_norm
            );
            metrics.push(m.row())?;
        }
        let done = step + 1;
        summary.steps = done;
        if evals_on && (done % config.eval_every == 0 || done == config.total_steps) {
            let r = run_eval(done, composer, bank)?;
            metrics.push(MetricsRow::eval(done, r))?;
            summary.evals.push((done, r));
        }
        if let Some(dir) = &setup.checkpoint_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                checkpoint::save_composer(&dir.join(format!("composer-step{done:06}.lmc")), composer)?;
            }
        }
    }
    if setup.backbone.fingerprint() != fingerprint {
        return Err(Error::contract("backbone parameters changed during training"));
    }
    if let Some(dir) = &setup.checkpoint_dir {
        checkpoint::save_composer(&dir.join("composer.lmc"), composer)?;
    }
    summary.backbone_fingerprint = fingerprint;
    Ok(summary)
}
