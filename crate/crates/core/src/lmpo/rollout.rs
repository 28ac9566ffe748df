use super::{compute_advantages, derive_seed, is_clipped, LmpoConfig};
use crate::bank::{ExperienceBank, Trajectory};
use crate::composer::{Composer, ComposerVars};
use crate::error::{Error, Result};
use crate::lm::{Backbone, BackboneVars, Binding};
use crate::mas::{execute_episode, plan_memory, Episode, EpisodeOptions, EpisodeStep, MasSystem, Mode, TaskInstance};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `G` rollouts of one query sampled under a frozen composer snapshot.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub task: TaskInstance,
    /// Retrieved trajectories, fixed for the whole group.
    pub retrieved: Vec<Trajectory>,
    /// Snapshot memories per agent index.
    pub memories: Vec<Option<Tensor<f32>>>,
    pub episodes: Vec<Episode>,
    /// `[trajectory][step][token]` log-probabilities under the snapshot.
    pub old_logprobs: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub token_count: usize,
}

impl RolloutGroup {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// Log-probabilities of a step's output, teacher-forced on a fresh tape.
pub fn teacher_forced_logprobs(
    backbone: &Backbone<f32>,
    memory: Option<&Tensor<f32>>,
    step: &EpisodeStep,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let vars = backbone.bind(&tape, Binding::Frozen);
    let m = memory.map(|m| tape.constant(m.clone()));
    let lp = backbone.sequence_token_logprobs(&tape, &vars, &step.prompt_ids, m, &step.output_ids)?;
    Ok(tape.value(lp).data().iter().map(|&v| v as f64).collect())
}

/// Samples a group at the training temperature. Returns `None` (and logs)
/// when every member produced only empty outputs.
#[allow(clippy::too_many_arguments)]
pub fn sample_group(
    system: &MasSystem,
    backbone: &Backbone<f32>,
    snapshot: &Composer<f32>,
    bank: &ExperienceBank,
    task: &TaskInstance,
    config: &LmpoConfig,
    opts: &EpisodeOptions,
    seed: u64,
) -> Result<Option<RolloutGroup>> {
    if system.mode != Mode::Latentmem {
        return Err(Error::contract("group sampling requires latentmem mode"));
    }
    let opts = EpisodeOptions {
        temperature: config.train_temperature,
        ..*opts
    };
    let plan = plan_memory(system, Some(snapshot), Some(bank), &task.query, &opts)?;
    let mut episodes = Vec::with_capacity(config.group_size);
    for i in 0..config.group_size {
        episodes.push(execute_episode(system, backbone, &plan, task, &opts, derive_seed(seed, i as u64))?);
    }
    let all_empty = episodes
        .iter()
        .all(|e| e.trajectory.steps.iter().all(|s| s.output.trim().is_empty()));
    if all_empty {
        log::warn!("skipping group for `{}`: every output is empty", task.query);
        return Ok(None);
    }
    let mut old_logprobs = Vec::with_capacity(episodes.len());
    for e in &episodes {
        let mut per_step = Vec::with_capacity(e.steps.len());
        for s in &e.steps {
            let memory = plan.memories.get(s.agent).and_then(Option::as_ref);
            per_step.push(teacher_forced_logprobs(backbone, memory, s)?);
        }
        old_logprobs.push(per_step);
    }
    let rewards: Vec<f64> = episodes.iter().map(|e| e.reward).collect();
    let advantages = compute_advantages(&rewards, config.adv_eps)?;
    let token_count = episodes.iter().map(Episode::token_count).sum();
    Ok(Some(RolloutGroup {
        task: task.clone(),
        retrieved: plan.retrieved,
        memories: plan.memories,
        episodes,
        old_logprobs,
        rewards,
        advantages,
        token_count,
    }))
}

/// The group's clipped surrogate on a tape.
pub struct Surrogate {
    /// Sum of clipped terms over every token of the group (scalar).
    pub sum: Var,
    /// `[trajectory][token]` ratio values, steps concatenated.
    pub ratios: Vec<Vec<f64>>,
    pub clipped: usize,
    pub tokens: usize,
}

/// Recomposes each agent's memory from the group's retrieved trajectories
/// and scores the sampled tokens. Differentiable in the composer vars.
#[allow(clippy::too_many_arguments)]
pub fn group_surrogate<S: Scalar>(
    tape: &Tape<S>,
    backbone: &Backbone<S>,
    bvars: &BackboneVars,
    composer: &Composer<S>,
    cvars: &ComposerVars,
    system: &MasSystem,
    group: &RolloutGroup,
    clip_eps: f64,
) -> Result<Surrogate> {
    let mut memories: Vec<Option<Var>> = vec![None; system.n_agents()];
    for &agent in &system.graph {
        if memories[agent].is_none() {
            let profile = &system.agents[agent].profile;
            memories[agent] = Some(composer.compose(tape, cvars, profile, &group.retrieved)?);
        }
    }
    let lo = S::from_f64_lossy(1.0 - clip_eps);
    let hi = S::from_f64_lossy(1.0 + clip_eps);
    let mut terms = Vec::new();
    let mut ratios = Vec::with_capacity(group.episodes.len());
    let mut clipped = 0;
    let mut tokens = 0;
    for ((e, old), &adv) in group.episodes.iter().zip(&group.old_logprobs).zip(&group.advantages) {
        let a = S::from_f64_lossy(adv);
        let mut traj_ratios = Vec::new();
        for (s, old) in e.steps.iter().zip(old) {
            if s.output_ids.is_empty() {
                continue;
            }
            let lp = backbone.sequence_token_logprobs(tape, bvars, &s.prompt_ids, memories[s.agent], &s.output_ids)?;
            let old = tape.constant(Tensor::from_vec(old.iter().map(|&v| S::from_f64_lossy(v)).collect()));
            let diff = tape.sub(lp, old)?;
            let ratio = tape.exp(diff);
            let unclipped = tape.scale(ratio, a);
            let bounded = tape.scale(tape.clamp(ratio, lo, hi), a);
            let term = tape.minimum(unclipped, bounded)?;
            terms.push(tape.sum(term));
            for &r in tape.value(ratio).data() {
                let r = r.to_f64().unwrap_or(f64::NAN);
                clipped += is_clipped(r, clip_eps) as usize;
                traj_ratios.push(r);
            }
            tokens += s.output_ids.len();
        }
        ratios.push(traj_ratios);
    }
    if terms.is_empty() {
        return Err(Error::contract("group has no generated tokens"));
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    Ok(Surrogate {
        sum,
        ratios,
        clipped,
        tokens,
    })
}

/// Per-token ratios `exp(logp_φ − logp_old)` for every trajectory of a group.
pub fn importance_ratios(
    backbone: &Backbone<f32>,
    composer: &Composer<f32>,
    system: &MasSystem,
    group: &RolloutGroup,
    clip_eps: f64,
) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let bvars = backbone.bind(&tape, Binding::Frozen);
    let cvars = composer.bind(&tape, Binding::Frozen);
    Ok(group_surrogate(&tape, backbone, &bvars, composer, &cvars, system, group, clip_eps)?.ratios)
}

