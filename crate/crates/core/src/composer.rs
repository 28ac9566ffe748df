//! Trainable composer mapping (role profile, retrieved trajectories) to a
//! fixed number of latent memory rows.
//!
//! The input stream `ROLE: <profile> [SEP] <rendered trajectories>` is embedded
//! with the backbone's frozen token table plus the composer's own positions,
//! run through bidirectional encoder blocks, and read out by learned latent
//! queries through one cross-attention layer and an output projection.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{render_context, Trajectory};
use crate::error::{Error, Result};
use crate::lm::layers::{
    bind, normal, AttnParams, AttnVars, Binding, BlockParams, BlockVars, LayerNormParams, LayerNormVars, Mask, Named,
    NamedMut,
};
use crate::lm::{Backbone, Tokenizer};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposerConfig {
    /// Number of latent rows produced.
    pub latent_len: usize,
    /// Maximum input tokens.
    pub context_budget: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        ComposerConfig {
            latent_len: 8,
            context_budget: 384,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComposerParams<S: Scalar> {
    pub latent_queries: Arc<Tensor<S>>,
    pub pos_embed: Arc<Tensor<S>>,
    pub encoder: Vec<BlockParams<S>>,
    pub ln_q: LayerNormParams<S>,
    pub ln_kv: LayerNormParams<S>,
    pub cross: AttnParams<S>,
    pub out_proj: Arc<Tensor<S>>,
}

#[derive(Clone, Debug)]
pub struct ComposerVars {
    pub latent_queries: Var,
    pub pos_embed: Var,
    pub encoder: Vec<BlockVars>,
    pub ln_q: LayerNormVars,
    pub ln_kv: LayerNormVars,
    pub cross: AttnVars,
    pub out_proj: Var,
    /// The backbone token table, always frozen.
    pub token_table: Var,
}

impl ComposerVars {
    /// Trainable vars in [`Composer::trainable_parameters`] order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.latent_queries, self.pos_embed];
        for b in &self.encoder {
            b.push_all(&mut out);
        }
        self.ln_q.push_all(&mut out);
        self.ln_kv.push_all(&mut out);
        self.cross.push_all(&mut out);
        out.push(self.out_proj);
        out
    }
}

/// Composer parameters plus a shared handle on the frozen token table.
/// Cloning is a cheap snapshot: parameter updates copy on write.
#[derive(Clone, Debug)]
pub struct Composer<S: Scalar> {
    pub config: ComposerConfig,
    pub d_model: usize,
    pub params: ComposerParams<S>,
    token_table: Arc<Tensor<S>>,
}

impl<S: Scalar> Composer<S> {
    pub fn init(config: ComposerConfig, backbone: &Backbone<S>, seed: u64) -> Result<Self> {
        let d = backbone.config.d_model;
        if config.latent_len == 0 || config.context_budget == 0 || config.n_heads == 0 || d % config.n_heads != 0 {
            return Err(Error::validation(format!(
                "composer needs positive sizes and heads dividing D={d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        // the read-out starts as a scaled identity, so initial memory rows are
        // attention-weighted mixtures of normalized input embeddings at the
        // token table's scale
        let mut cross = AttnParams::init(d, std, std, &mut rng);
        cross.wv = scaled_identity(d, 1.0);
        cross.wo = scaled_identity(d, 1.0);
        let table = &backbone.params.tok_embed;
        let mean_norm = (0..table.rows())
            .map(|r| table.row(r).iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / table.rows() as f64;
        let params = ComposerParams {
            latent_queries: normal(&[config.latent_len, d], 0.02, &mut rng),
            pos_embed: normal(&[config.context_budget, d], 0.01, &mut rng),
            encoder: (0..config.n_layers)
                .map(|_| BlockParams::init(d, config.d_ff, config.n_layers.max(1), &mut rng))
                .collect(),
            ln_q: LayerNormParams::new(d),
            ln_kv: LayerNormParams::new(d),
            cross,
            out_proj: scaled_identity(d, mean_norm / (d as f64).sqrt()),
        };
        Ok(Composer {
            config,
            d_model: d,
            params,
            token_table: Arc::clone(&backbone.params.tok_embed),
        })
    }

    /// Trainable tensors in their canonical order: latent queries, positions,
    /// encoder blocks, the two cross-attention norms, cross-attention
    /// weights, output projection.
    pub fn trainable_parameters(&self) -> Named<'_, S> {
        let p = &self.params;
        let mut out: Named<'_, S> = vec![
            ("latent_queries".into(), &p.latent_queries),
            ("pos_embed".into(), &p.pos_embed),
        ];
        for (i, b) in p.encoder.iter().enumerate() {
            b.visit(&format!("encoder.{i}."), &mut out);
        }
        p.ln_q.visit("ln_q.", &mut out);
        p.ln_kv.visit("ln_kv.", &mut out);
        p.cross.visit("cross.", &mut out);
        out.push(("out_proj".into(), &p.out_proj));
        out
    }

    pub fn trainable_parameters_mut(&mut self) -> NamedMut<'_, S> {
        let p = &mut self.params;
        let mut out: NamedMut<'_, S> = vec![
            ("latent_queries".into(), &mut p.latent_queries),
            ("pos_embed".into(), &mut p.pos_embed),
        ];
        for (i, b) in p.encoder.iter_mut().enumerate() {
            b.visit_mut(&format!("encoder.{i}."), &mut out);
        }
        p.ln_q.visit_mut("ln_q.", &mut out);
        p.ln_kv.visit_mut("ln_kv.", &mut out);
        p.cross.visit_mut("cross.", &mut out);
        out.push(("out_proj".into(), &mut p.out_proj));
        out
    }

    /// Total trainable scalar count.
    pub fn census(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Frozen copy for the old-policy side of importance ratios.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    /// Replaces parameters from named tensors, checking names and shapes.
    pub fn load_named(&mut self, mut tensors: HashMap<String, Tensor<S>>) -> Result<()> {
        for (name, slot) in self.trainable_parameters_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Composer<T> {
        let p = &self.params;
        Composer {
            config: self.config,
            d_model: self.d_model,
            params: ComposerParams {
                latent_queries: Arc::new(p.latent_queries.cast()),
                pos_embed: Arc::new(p.pos_embed.cast()),
                encoder: p.encoder.iter().map(|b| b.cast()).collect(),
                ln_q: p.ln_q.cast(),
                ln_kv: p.ln_kv.cast(),
                cross: p.cross.cast(),
                out_proj: Arc::new(p.out_proj.cast()),
            },
            token_table: Arc::new(self.token_table.cast()),
        }
    }

    /// Points the frozen token table at `backbone`'s (e.g. after a cast).
    pub fn attach(&mut self, backbone: &Backbone<S>) -> Result<()> {
        if backbone.config.d_model != self.d_model {
            return Err(Error::contract(format!(
                "backbone D={} does not match composer D={}",
                backbone.config.d_model, self.d_model
            )));
        }
        self.token_table = Arc::clone(&backbone.params.tok_embed);
        Ok(())
    }

    pub fn bind(&self, tape: &Tape<S>, mode: Binding) -> ComposerVars {
        let p = &self.params;
        ComposerVars {
            latent_queries: bind(tape, &p.latent_queries, mode),
            pos_embed: bind(tape, &p.pos_embed, mode),
            encoder: p.encoder.iter().map(|b| b.bind(tape, mode)).collect(),
            ln_q: p.ln_q.bind(tape, mode),
            ln_kv: p.ln_kv.bind(tape, mode),
            cross: p.cross.bind(tape, mode),
            out_proj: bind(tape, &p.out_proj, mode),
            token_table: tape.frozen(Arc::clone(&self.token_table)),
        }
    }

    /// Token ids of the composer input, keeping the most recent trajectory
    /// content when over the context budget.
    pub fn input_ids(&self, role: &str, retrieved: &[Trajectory]) -> Result<Vec<usize>> {
        if role.trim().is_empty() {
            return Err(Error::contract("role profile must be nonempty"));
        }
        let tok = Tokenizer;
        let budget = self.config.context_budget;
        let mut ids = tok.encode_marked(&format!("ROLE: {role} [SEP] "));
        ids.truncate(budget);
        let room = budget - ids.len();
        if room > 0 {
            let rendered = render_context(retrieved, budget * 4);
            let ctx = tok.encode_marked(&rendered);
            ids.extend_from_slice(&ctx[ctx.len().saturating_sub(room)..]);
        }
        Ok(ids)
    }

    /// Latent memory on `tape`, shape `latent_len×D`.
    pub fn compose(&self, tape: &Tape<S>, vars: &ComposerVars, role: &str, retrieved: &[Trajectory]) -> Result<Var> {
        let ids = self.input_ids(role, retrieved)?;
        self.compose_ids(tape, vars, &ids)
    }

    pub fn compose_ids(&self, tape: &Tape<S>, vars: &ComposerVars, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.config.context_budget {
            return Err(Error::contract(format!(
                "composer input of {} tokens outside 1..={}",
                ids.len(),
                self.config.context_budget
            )));
        }
        let tok = tape.gather(vars.token_table, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather(vars.pos_embed, &positions)?;
        let mut x = tape.add(tok, pos)?;
        for b in &vars.encoder {
            x = b.apply(tape, x, self.config.n_heads, Mask::None)?;
        }
        let kv = vars.ln_kv.apply(tape, x)?;
        let q = vars.ln_q.apply(tape, vars.latent_queries)?;
        let read = vars.cross.apply(tape, q, kv, self.config.n_heads, Mask::None)?;
        let h = tape.add(vars.latent_queries, read)?;
        tape.matmul(h, vars.out_proj)
    }

    /// Evaluates a memory outside of any training graph.
    pub fn compose_value(&self, role: &str, retrieved: &[Trajectory]) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, Binding::Frozen);
        let m = self.compose(&tape, &vars, role, retrieved)?;
        Ok((*tape.value(m)).clone())
    }
}

fn scaled_identity<S: Scalar>(d: usize, scale: f64) -> Arc<Tensor<S>> {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.data_mut()[i * d + i] = S::from_f64_lossy(scale);
    }
    Arc::new(t)
}

/// Row mean of a latent memory.
pub fn mean_latent_embedding<S: Scalar>(m: &Tensor<S>) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (acc, v) in out.iter_mut().zip(m.row(r)) {
            *acc += v.to_f64().unwrap();
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::TrajectoryStep;
    use crate::lm::TransformerConfig;

    fn setup() -> (Backbone<f64>, Composer<f64>) {
        let bb = Backbone::init(
            TransformerConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                d_ff: 16,
                max_seq_len: 64,
                vocab_size: crate::lm::tokenizer::VOCAB_SIZE,
            },
            1,
        )
        .unwrap();
        let cfg = ComposerConfig {
            latent_len: 4,
            context_budget: 96,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
        };
        let c = Composer::init(cfg, &bb, 2).unwrap();
        (bb, c)
    }

    fn traj() -> Trajectory {
        Trajectory {
            id: 0,
            query: "VALUE OF abcde?".into(),
            steps: vec![TrajectoryStep {
                agent_idx: 0,
                prompt: "p".into(),
                output: "DRAFT 4".into(),
            }],
            reward: Some(1.0),
            task_tag: "kv_recall".into(),
        }
    }

    #[test]
    fn shape_is_fixed() {
        let (_, c) = setup();
        assert_eq!(c.compose_value("solver", &[]).unwrap().shape(), &[4, 8]);
        let many = vec![traj(); 20];
        assert_eq!(c.compose_value("solver", &many).unwrap().shape(), &[4, 8]);
        assert!(c.input_ids("solver", &many).unwrap().len() <= 96);
    }

    #[test]
    fn roles_separate_and_empty_role_fails() {
        let (_, c) = setup();
        let a = c.compose_value("solver", &[traj()]).unwrap();
        let b = c.compose_value("checker", &[traj()]).unwrap();
        assert!(a.distance(&b) > 0.0);
        assert!(c.compose_value("  ", &[]).is_err());
    }

    #[test]
    fn snapshot_is_isolated() {
        let (_, mut c) = setup();
        let old = c.snapshot();
        let before = old.compose_value("solver", &[traj()]).unwrap();
        assert!(c.compose_value("solver", &[traj()]).unwrap().bit_eq(&before));
        for (_, p) in c.trainable_parameters_mut() {
            Arc::make_mut(p).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(old.compose_value("solver", &[traj()]).unwrap().bit_eq(&before));
        let again = old.snapshot();
        assert!(again.compose_value("solver", &[traj()]).unwrap().bit_eq(&before));
    }

    #[test]
    fn census_matches_formula() {
        let (_, c) = setup();
        let (d, f, lp, ctx) = (8, 16, 4, 96);
        let block = 2 * d + (4 * d * d + 4 * d) + 2 * d + (d * f + f + f * d + d);
        let want = lp * d + ctx * d + 2 * block + 4 * d + (4 * d * d + 4 * d) + d * d;
        assert_eq!(c.census(), want);
        let names: Vec<String> = c.trainable_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().unwrap(), "latent_queries");
        assert_eq!(names.last().unwrap(), "out_proj");
        assert!(names.iter().all(|n| !n.starts_with("tok_embed")));
    }

    #[test]
    fn mean_latent_examples() {
        let m = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(mean_latent_embedding(&m), vec![1.0, 2.0]);
        let n = m.map(|v| -v);
        assert_eq!(mean_latent_embedding(&n), vec![-1.0, -2.0]);
    }
}
