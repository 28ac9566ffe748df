//! Scripted reference dialogues: bank initialization and the backbone
//! pretraining corpus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bank::{ExperienceBank, TextEmbedder, Trajectory, TrajectoryStep};
use crate::error::{Error, Result};
use crate::lm::pretrain::TrainLine;
use crate::lm::Tokenizer;
use crate::mas::episode::prompt_ids;
use crate::mas::system::{answer_output, draft_output, prompt_text, Role, Topology};
use crate::mas::tasks::{Split, TaskFamily, TaskInstance, World};

/// A correct dialogue for `task` in the given topology.
pub fn reference_trajectory(topology: Topology, task: &TaskInstance) -> Trajectory {
    let mut prior: Vec<(Role, String)> = Vec::new();
    let mut steps = Vec::new();
    for (agent, &role) in topology.roles().iter().enumerate() {
        let prompt = prompt_text(role, &task.query, &prior);
        let output = role.reference_output(task.family, &task.gold);
        steps.push(TrajectoryStep {
            agent_idx: agent as u32,
            prompt,
            output: output.clone(),
        });
        prior.push((role, output));
    }
    Trajectory {
        id: 0,
        query: task.query.clone(),
        steps,
        reward: Some(1.0),
        task_tag: task.family.name().into(),
    }
}

/// Fills a bank with `per_world` reference trajectories for every
/// (family, world) pair and records the initial capacity.
pub fn bootstrap_bank(
    families: &[TaskFamily],
    worlds: &[u64],
    per_world: usize,
    topology: Topology,
    embedder: TextEmbedder,
) -> Result<ExperienceBank> {
    if per_world == 0 {
        return Err(Error::contract("per_world must be at least 1"));
    }
    let mut bank = ExperienceBank::new(embedder);
    for &family in families {
        for &seed in worlds {
            let world = World::generate(family, seed);
            for i in 0..per_world {
                bank.seed(reference_trajectory(topology, &world.reference_task(i)))?;
            }
        }
    }
    bank.mark_initialized();
    Ok(bank)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    pub lines: usize,
    /// Length of the memory slot; matches the latent length.
    pub slot_len: usize,
    /// Pretraining worlds are `world_base..world_base + worlds`.
    pub world_base: u64,
    pub worlds: u64,
    /// Fraction of lines drawn from the key/value family.
    pub kv_share: f64,
    /// Fraction of key/value lines whose slot carries the answer.
    pub slot_share: f64,
    /// Fraction of lines whose slot carries only non-digit filler.
    pub junk_share: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            lines: 6000,
            slot_len: 8,
            world_base: 1_000_000,
            worlds: 2000,
            kv_share: 0.7,
            slot_share: 0.5,
            junk_share: 0.25,
        }
    }
}

const FILLER: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ .,:;!?-+*/=<>()[]#@";
const MIN_DIGIT_WEIGHT: f32 = 0.03;

/// Slot rows as random mixtures of filler-character embeddings. With an
/// answer, some rows (at least one) also mix in the answer digit with a
/// weight of at least 0.3. Rows are rescaled by a factor in [0.5, 1.5].
fn soft_slot(answer: Option<char>, len: usize, rng: &mut impl Rng) -> Vec<Vec<(usize, f32)>> {
    let forced = rng.gen_range(0..len);
    (0..len)
        .map(|r| {
            let digit = answer.filter(|_| r == forced || rng.gen_bool(0.5));
            // log-uniform, so faint mixtures like an untrained composer's still carry signal
            let w_digit = if digit.is_some() { (rng.gen_range(MIN_DIGIT_WEIGHT.ln()..=0.0f32)).exp() } else { 0.0 };
            let n_fill = rng.gen_range(1..=3);
            let raw: Vec<f32> = (0..n_fill).map(|_| rng.gen_range(0.05..1.0f32)).collect();
            let total: f32 = raw.iter().sum();
            let scale = rng.gen_range(0.5..=1.5f32);
            let mut row: Vec<(usize, f32)> = raw
                .iter()
                .map(|w| {
                    let c = *FILLER.choose(rng).unwrap() as char;
                    (Tokenizer::char_id(c), scale * (1.0 - w_digit) * w / total)
                })
                .collect();
            if let Some(d) = digit {
                row.push((Tokenizer::char_id(d), scale * w_digit));
            }
            row
        })
        .collect()
}

/// Lines in the multi-agent prompt format. Key/value lines whose slot holds
/// no answer teach guessing (solver) and copying the draft (checker); lines
/// whose slot mixes in the answer digit teach reading it. Other families
/// teach the output formats and character-level copying.
pub fn pretraining_corpus(config: &CorpusConfig, seed: u64) -> Vec<TrainLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = Tokenizer;
    let mut lines = Vec::with_capacity(config.lines);
    while lines.len() < config.lines {
        let family = if rng.gen_bool(config.kv_share) {
            TaskFamily::KvRecall
        } else if rng.gen_bool(0.5) {
            TaskFamily::StringTransform
        } else {
            TaskFamily::ModArith
        };
        let world = World::generate(family, config.world_base + rng.gen_range(0..config.worlds.max(1)));
        let split = if rng.gen_bool(0.5) { Split::Train } else { Split::Eval };
        let task = world.task(split, rng.gen_range(0..1000));
        let topology = if rng.gen_bool(0.5) { Topology::Chain2 } else { Topology::Chain3 };
        let roles = topology.roles();
        let pos = rng.gen_range(0..roles.len());
        let kv = family == TaskFamily::KvRecall;
        let u: f64 = rng.gen();
        let slotted = kv && config.slot_len > 0 && u < config.slot_share;
        let junk = !slotted && config.slot_len > 0 && u >= 1.0 - config.junk_share;

        let guess = rng.gen_range(0..10).to_string();
        let draft = if kv { guess } else { task.gold.clone() };
        let mut prior = Vec::new();
        for &r in &roles[..pos] {
            let out = match r {
                Role::Solver => draft_output(&draft),
                other => other.reference_output(family, &task.gold),
            };
            prior.push((r, out));
        }
        let role = roles[pos];
        let target = match role {
            Role::Planner => role.reference_output(family, &task.gold),
            Role::Solver if slotted => draft_output(&task.gold),
            Role::Solver if kv => draft_output(&rng.gen_range(0..10).to_string()),
            Role::Solver => draft_output(&task.gold),
            Role::Checker if slotted => answer_output(&task.gold),
            Role::Checker => answer_output(&draft),
        };
        let context = prompt_ids(&prompt_text(role, &task.query, &prior));
        let rows = if slotted {
            soft_slot(task.gold.chars().next(), config.slot_len, &mut rng)
        } else if junk {
            soft_slot(None, config.slot_len, &mut rng)
        } else {
            Vec::new()
        };
        lines.push(TrainLine::with_soft_slot(&context, rows, &tok.encode(&target)));
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mas::episode::compute_reward;
    use std::sync::Arc;

    fn embedder() -> TextEmbedder {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        TextEmbedder::new(
            Arc::new(crate::tensor::Tensor::randn(&[crate::lm::tokenizer::VOCAB_SIZE, 16], 1.0, &mut rng)),
            512,
        )
    }

    #[test]
    fn bootstrap_count_law_and_rewards() {
        let bank = bootstrap_bank(&[TaskFamily::KvRecall], &[0, 1], 3, Topology::Chain2, embedder()).unwrap();
        assert_eq!(bank.len(), 6);
        assert_eq!(bank.initial_capacity(), 6);
        let mut i = 0;
        for seed in [0, 1] {
            let world = World::generate(TaskFamily::KvRecall, seed);
            for k in 0..3 {
                let task = world.reference_task(k);
                let t = &bank.entries()[i];
                assert_eq!(t.query, task.query);
                assert_eq!(compute_reward(t, &task), 1.0);
                i += 1;
            }
        }
    }

    #[test]
    fn reference_dialogue_format() {
        let w = World::generate(TaskFamily::KvRecall, 4);
        let task = w.task(Split::Train, 0);
        let t = reference_trajectory(Topology::Chain3, &task);
        assert_eq!(t.steps.len(), 3);
        assert_eq!(t.steps[0].output, "PLAN lookup");
        assert_eq!(t.steps[2].output, format!("<answer>{}</answer>", task.gold));
        assert_eq!(compute_reward(&t, &task), 1.0);
    }

    #[test]
    fn corpus_slots_hold_the_answer() {
        let cfg = CorpusConfig {
            lines: 300,
            ..CorpusConfig::default()
        };
        let lines = pretraining_corpus(&cfg, 7);
        assert_eq!(lines.len(), 300);
        assert_eq!(lines, pretraining_corpus(&cfg, 7));
        let digits: Vec<usize> = ('0'..='9').map(Tokenizer::char_id).collect();
        let mut answered = 0;
        let mut junk = 0;
        for l in &lines {
            let Some(slot) = &l.slot else { continue };
            assert_eq!(slot.rows.len(), cfg.slot_len);
            let slot_digits: Vec<usize> = slot
                .rows
                .iter()
                .flatten()
                .filter(|(id, _)| digits.contains(id))
                .map(|(id, _)| *id)
                .collect();
            if slot_digits.is_empty() {
                junk += 1;
                continue;
            }
            answered += 1;
            // the answer digit is the first digit of the target; planner
            // targets carry none
            let Some(target_digit) = l.ids[slot.at..].iter().find(|id| digits.contains(id)) else {
                continue;
            };
            assert!(slot_digits.iter().all(|d| d == target_digit));
        }
        assert!(answered > 50 && junk > 30, "{answered} {junk}");
    }
}
