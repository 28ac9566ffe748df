//! Episode rollout and reward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bank::{render_context, ExperienceBank, Trajectory, TrajectoryStep};
use crate::composer::Composer;
use crate::error::{Error, Result};
use crate::lm::tokenizer::BOS;
use crate::lm::{sample_completion, Backbone, Tokenizer};
use crate::mas::system::{prompt_text, MasSystem, Mode, Role};
use crate::mas::tasks::TaskInstance;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOptions {
    /// Trajectories retrieved per episode.
    pub top_k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Character budget of rendered trajectories in raw-context prompts.
    pub raw_context_chars: usize,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            top_k: 1,
            temperature: 0.0,
            max_new_tokens: 24,
            raw_context_chars: 384,
        }
    }
}

/// Memory inputs fixed for one episode (or one group of episodes).
#[derive(Debug, Clone, Default)]
pub struct MemoryPlan {
    pub retrieved: Vec<Trajectory>,
    /// Latent memory per agent index; `None` when the agent gets none.
    pub memories: Vec<Option<Tensor<f32>>>,
    pub raw_context: Option<String>,
    pub compose_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub agent: usize,
    pub prompt_ids: Vec<usize>,
    pub output_ids: Vec<usize>,
    /// Temperature-1 log-probabilities of `output_ids` at sampling time.
    pub logprobs: Vec<f64>,
    pub memory_rows: usize,
}

impl EpisodeStep {
    /// Rows the backbone consumed before the first output token.
    pub fn context_rows(&self) -> usize {
        self.prompt_ids.len() + self.memory_rows
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub steps: Vec<EpisodeStep>,
    pub reward: f64,
}

impl Episode {
    pub fn token_count(&self) -> usize {
        self.steps.iter().map(|s| s.output_ids.len()).sum()
    }
}

/// Retrieves once and composes once per acting agent.
pub fn plan_memory(
    system: &MasSystem,
    composer: Option<&Composer<f32>>,
    bank: Option<&ExperienceBank>,
    query: &str,
    opts: &EpisodeOptions,
) -> Result<MemoryPlan> {
    let mut plan = MemoryPlan {
        memories: vec![None; system.n_agents()],
        ..MemoryPlan::default()
    };
    match system.mode {
        Mode::NoMemory => {}
        Mode::RawContext => {
            if let Some(bank) = bank {
                plan.retrieved = bank.retrieve_topk(query, opts.top_k)?;
            }
            if !plan.retrieved.is_empty() {
                plan.raw_context = Some(render_context(&plan.retrieved, opts.raw_context_chars));
            }
        }
        Mode::Latentmem => {
            let (Some(bank), Some(composer)) = (bank, composer) else {
                return Err(Error::contract("latentmem mode needs both a bank and a composer"));
            };
            plan.retrieved = bank.retrieve_topk(query, opts.top_k)?;
            for &agent in &system.graph {
                if plan.memories[agent].is_none() {
                    let profile = &system.agents[agent].profile;
                    plan.memories[agent] = Some(composer.compose_value(profile, &plan.retrieved)?);
                    plan.compose_calls += 1;
                }
            }
        }
    }
    Ok(plan)
}

/// Token ids of a prompt: `BOS` followed by the text.
pub fn prompt_ids(text: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(Tokenizer.encode(text));
    ids
}

/// Runs the agents in graph order under a fixed memory plan.
pub fn execute_episode(
    system: &MasSystem,
    backbone: &Backbone<f32>,
    plan: &MemoryPlan,
    task: &TaskInstance,
    opts: &EpisodeOptions,
    seed: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = Tokenizer;
    let mut prior: Vec<(Role, String)> = Vec::with_capacity(system.horizon());
    let mut steps = Vec::with_capacity(system.horizon());
    let mut record = Vec::with_capacity(system.horizon());
    for &agent in &system.graph {
        let role = system.agents[agent].role;
        // stored prompts omit the raw-context prefix
        let base = prompt_text(role, &task.query, &prior);
        let full = match &plan.raw_context {
            Some(ctx) => format!("{ctx}{base}"),
            None => base.clone(),
        };
        let memory = plan.memories.get(agent).and_then(|m| m.as_ref());
        let memory_rows = memory.map_or(0, |m| m.rows());
        let ids = backbone.fit_prompt(&prompt_ids(&full), memory_rows + opts.max_new_tokens);
        let out = sample_completion(backbone, &ids, memory, opts.temperature, opts.max_new_tokens, &mut rng)?;
        let text = tok.decode(&out.ids);
        record.push(TrajectoryStep {
            agent_idx: agent as u32,
            prompt: base,
            output: text.clone(),
        });
        prior.push((role, text));
        steps.push(EpisodeStep {
            agent,
            prompt_ids: ids,
            output_ids: out.ids,
            logprobs: out.logprobs,
            memory_rows,
        });
    }
    let mut trajectory = Trajectory {
        id: 0,
        query: task.query.clone(),
        steps: record,
        reward: None,
        task_tag: task.family.name().into(),
    };
    let reward = compute_reward(&trajectory, task);
    trajectory.reward = Some(reward as f32);
    Ok(Episode {
        trajectory,
        steps,
        reward,
    })
}

/// Retrieval, composition and rollout for one query.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    system: &MasSystem,
    backbone: &Backbone<f32>,
    composer: Option<&Composer<f32>>,
    bank: Option<&ExperienceBank>,
    task: &TaskInstance,
    opts: &EpisodeOptions,
    seed: u64,
) -> Result<Episode> {
    let plan = plan_memory(system, composer, bank, &task.query, opts)?;
    execute_episode(system, backbone, &plan, task, opts, seed)
}

/// Text between `<answer>` and `</answer>`, else the last nonempty line.
pub fn extract_answer(output: &str) -> &str {
    if let Some(start) = output.find("<answer>") {
        let rest = &output[start + "<answer>".len()..];
        if let Some(end) = rest.find("</answer>") {
            return rest[..end].trim();
        }
    }
    output
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .last()
        .unwrap_or("")
}

/// 1 when the final agent's answer matches the gold answer (ignoring case).
pub fn compute_reward(trajectory: &Trajectory, task: &TaskInstance) -> f64 {
    let answer = extract_answer(trajectory.final_output());
    if answer.eq_ignore_ascii_case(task.gold.trim()) {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mas::tasks::{Split, TaskFamily};

    fn task() -> TaskInstance {
        TaskInstance {
            family: TaskFamily::KvRecall,
            world_id: "w".into(),
            query: "VALUE OF abc?".into(),
            gold: "7".into(),
            split: Split::Train,
        }
    }

    fn with_output(out: &str) -> Trajectory {
        Trajectory {
            id: 0,
            query: "q".into(),
            steps: vec![TrajectoryStep {
                agent_idx: 0,
                prompt: "p".into(),
                output: out.into(),
            }],
            reward: None,
            task_tag: "kv_recall".into(),
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(compute_reward(&with_output("<answer>7</answer>"), &task()), 1.0);
        assert_eq!(compute_reward(&with_output("the answer is 8"), &task()), 0.0);
        assert_eq!(compute_reward(&with_output("thinking\n7\n"), &task()), 1.0);
        assert_eq!(compute_reward(&with_output("<answer> 7 </answer> tail"), &task()), 1.0);
        let mut t = task();
        t.gold = "Abc".into();
        assert_eq!(compute_reward(&with_output("<answer>aBC</answer>"), &t), 1.0);
    }
}
