//! Finite-difference check of the whole composer → backbone → loss graph.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::rollout::{group_surrogate, RolloutGroup};
use crate::composer::{Composer, ComposerConfig};
use crate::error::Result;
use crate::lm::tokenizer::{EOS, VOCAB_SIZE};
use crate::lm::{Backbone, Binding, TransformerConfig};
use crate::mas::episode::prompt_ids;
use crate::mas::system::prompt_text;
use crate::mas::{build_system, reference_trajectory, Episode, EpisodeStep, MasSystem, Mode, TaskFamily, Topology, World};
use crate::tensor::gradcheck::{relative_error, DEFAULT_STEP};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct FullGraphCheck {
    /// `(parameter name, relative error)` for every composer tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
    /// Backbone tensors that received a gradient (must be 0).
    pub backbone_grads: usize,
    pub loss: f64,
}

struct Fixture {
    backbone: Backbone<f64>,
    composer: Composer<f64>,
    system: MasSystem,
    group: RolloutGroup,
    tokens: usize,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let backbone = Backbone::<f64>::init(
        TransformerConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 64,
            vocab_size: VOCAB_SIZE,
        },
        seed,
    )?;
    let mut composer = Composer::init(
        ComposerConfig {
            latent_len: 2,
            context_budget: 48,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
        },
        &backbone,
        seed + 1,
    )?;
    // larger weights than the default init so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for (_, p) in composer.trainable_parameters_mut() {
        let noise = Tensor::<f64>::randn(p.shape(), 0.3, &mut rng);
        Arc::make_mut(p).add_assign_tensor(&noise);
    }
    let system = build_system("chain2", Mode::Latentmem)?;
    let world = World::generate(TaskFamily::KvRecall, seed);
    let task = world.reference_task(0);
    let retrieved = vec![reference_trajectory(Topology::Chain2, &task)];

    let outputs: [[&[usize]; 2]; 2] = [[&[40, 41, 12, EOS], &[7, EOS]], [&[33, EOS], &[50, 51, 52]]];
    let mut episodes = Vec::new();
    for outs in outputs {
        let mut steps = Vec::new();
        for (agent, out) in outs.iter().enumerate() {
            let role = system.agents[agent].role;
            steps.push(EpisodeStep {
                agent,
                prompt_ids: prompt_ids(&prompt_text(role, &task.query, &[])),
                output_ids: out.to_vec(),
                logprobs: Vec::new(),
                memory_rows: composer.config.latent_len,
            });
        }
        episodes.push(Episode {
            trajectory: retrieved[0].clone(),
            steps,
            reward: 0.0,
        });
    }
    let tokens = episodes.iter().map(Episode::token_count).sum();
    let mut group = RolloutGroup {
        task,
        retrieved,
        memories: vec![None; 2],
        episodes,
        old_logprobs: Vec::new(),
        rewards: vec![1.0, 0.0],
        advantages: vec![1.0, -0.7],
        token_count: tokens,
    };
    // old log-probabilities offset from the current ones so that ratios fall
    // both inside and outside the clip range, away from its edges
    let tape = Tape::new();
    let bvars = backbone.bind(&tape, Binding::Frozen);
    let cvars = composer.bind(&tape, Binding::Frozen);
    let offsets = [0.05, -0.1, 0.4, -0.5, 0.02];
    let mut k = 0;
    for e in &group.episodes {
        let mut per_step = Vec::new();
        for s in &e.steps {
            let m = composer.compose(&tape, &cvars, &system.agents[s.agent].profile, &group.retrieved)?;
            let lp = backbone.sequence_token_logprobs(&tape, &bvars, &s.prompt_ids, Some(m), &s.output_ids)?;
            let vals: Vec<f64> = tape
                .value(lp)
                .data()
                .iter()
                .map(|&v| {
                    k += 1;
                    v - offsets[k % offsets.len()]
                })
                .collect();
            per_step.push(vals);
        }
        group.old_logprobs.push(per_step);
    }
    Ok(Fixture {
        backbone,
        composer,
        system,
        group,
        tokens,
    })
}

fn loss_value(f: &Fixture, composer: &Composer<f64>) -> Result<f64> {
    let tape = Tape::new();
    let bvars = f.backbone.bind(&tape, Binding::Frozen);
    let cvars = composer.bind(&tape, Binding::Frozen);
    let s = group_surrogate(&tape, &f.backbone, &bvars, composer, &cvars, &f.system, &f.group, 0.2)?;
    Ok(-tape.value(s.sum).item() / f.tokens as f64)
}

/// Central differences over every composer parameter of a miniature model.
pub fn full_graph_check(seed: u64) -> Result<FullGraphCheck> {
    let f = fixture(seed)?;
    let tape = Tape::new();
    let bvars = f.backbone.bind(&tape, Binding::Frozen);
    let cvars = f.composer.bind(&tape, Binding::Trainable);
    let s = group_surrogate(&tape, &f.backbone, &bvars, &f.composer, &cvars, &f.system, &f.group, 0.2)?;
    let loss = tape.scale(s.sum, -1.0 / f.tokens as f64);
    let loss_v = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let backbone_grads = bvars.flat().into_iter().filter(|&v| grads.contains(v)).count();

    let h = DEFAULT_STEP;
    let names: Vec<String> = f.composer.trainable_parameters().into_iter().map(|(n, _)| n).collect();
    let mut per_tensor = Vec::with_capacity(names.len());
    for (idx, (name, var)) in names.into_iter().zip(cvars.flat()).enumerate() {
        let shape = f.composer.trainable_parameters()[idx].1.shape().to_vec();
        let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let mut numeric = Tensor::zeros(&shape);
        let mut probe = f.composer.clone();
        for k in 0..numeric.numel() {
            let orig = probe.trainable_parameters()[idx].1.data()[k];
            let set = |c: &mut Composer<f64>, v: f64| {
                let mut params = c.trainable_parameters_mut();
                Arc::make_mut(params[idx].1).data_mut()[k] = v;
            };
            set(&mut probe, orig + h);
            let plus = loss_value(&f, &probe)?;
            set(&mut probe, orig - h);
            let minus = loss_value(&f, &probe)?;
            set(&mut probe, orig);
            numeric.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        per_tensor.push((name, relative_error(&analytic, &numeric)));
    }
    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(FullGraphCheck {
        per_tensor,
        max_rel_error,
        backbone_grads,
        loss: loss_v,
    })
}
