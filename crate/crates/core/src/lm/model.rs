//! Decoder-only transformer backbone with optional latent-memory rows.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{bind, BlockParams, BlockVars, Binding, LayerNormParams, LayerNormVars, Mask, Named, NamedMut};
use super::tokenizer::{BOS, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_seq_len: 512,
            vocab_size: VOCAB_SIZE,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug)]
pub struct BackboneParams<S: Scalar> {
    /// `V×D`, also used (transposed) as the output projection.
    pub tok_embed: Arc<Tensor<S>>,
    /// `max_seq_len×D`.
    pub pos_embed: Arc<Tensor<S>>,
    pub blocks: Vec<BlockParams<S>>,
    pub ln_f: LayerNormParams<S>,
}

/// Backbone parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub tok_embed: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_f: LayerNormVars,
}

impl BackboneVars {
    /// Vars in the same order as [`Backbone::named_params`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.tok_embed, self.pos_embed];
        for b in &self.blocks {
            b.push_all(&mut out);
        }
        self.ln_f.push_all(&mut out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<S: Scalar> {
    pub config: TransformerConfig,
    pub params: BackboneParams<S>,
}

impl<S: Scalar> Backbone<S> {
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let tok_embed = Arc::new(Tensor::randn(&[config.vocab_size, d], 0.02, &mut rng));
        let pos_embed = Arc::new(Tensor::randn(&[config.max_seq_len, d], 0.01, &mut rng));
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams::init(d, config.d_ff, config.n_layers, &mut rng))
            .collect();
        Ok(Backbone {
            config,
            params: BackboneParams {
                tok_embed,
                pos_embed,
                blocks,
                ln_f: LayerNormParams::new(d),
            },
        })
    }

    /// All parameters in their canonical order.
    pub fn named_params(&self) -> Named<'_, S> {
        let p = &self.params;
        let mut out: Named<'_, S> = vec![
            ("tok_embed".to_string(), &p.tok_embed),
            ("pos_embed".to_string(), &p.pos_embed),
        ];
        for (i, b) in p.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}."), &mut out);
        }
        p.ln_f.visit("ln_f.", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> NamedMut<'_, S> {
        let p = &mut self.params;
        let mut out: NamedMut<'_, S> = vec![
            ("tok_embed".to_string(), &mut p.tok_embed),
            ("pos_embed".to_string(), &mut p.pos_embed),
        ];
        for (i, b) in p.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}."), &mut out);
        }
        p.ln_f.visit_mut("ln_f.", &mut out);
        out
    }

    /// Rebuilds a backbone from named tensors, checking names and shapes.
    pub fn from_named(config: TransformerConfig, mut tensors: HashMap<String, Tensor<S>>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        for (name, slot) in model.named_params_mut() {
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
        Ok(model)
    }

    pub fn cast<T: Scalar>(&self) -> Backbone<T> {
        let p = &self.params;
        Backbone {
            config: self.config,
            params: BackboneParams {
                tok_embed: Arc::new(p.tok_embed.cast()),
                pos_embed: Arc::new(p.pos_embed.cast()),
                blocks: p.blocks.iter().map(|b| b.cast()).collect(),
                ln_f: p.ln_f.cast(),
            },
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over parameter names, shapes and little-endian f32 payloads.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.to_f64().unwrap() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn bind(&self, tape: &Tape<S>, mode: Binding) -> BackboneVars {
        let p = &self.params;
        BackboneVars {
            tok_embed: bind(tape, &p.tok_embed, mode),
            pos_embed: bind(tape, &p.pos_embed, mode),
            blocks: p.blocks.iter().map(|b| b.bind(tape, mode)).collect(),
            ln_f: p.ln_f.bind(tape, mode),
        }
    }

    /// Drops the oldest non-BOS tokens so that `reserve` rows remain free.
    pub fn fit_prompt(&self, prompt_ids: &[usize], reserve: usize) -> Vec<usize> {
        let budget = self.config.max_seq_len.saturating_sub(reserve).max(1);
        if prompt_ids.len() <= budget {
            return prompt_ids.to_vec();
        }
        log::warn!(
            "prompt of {} tokens exceeds budget {budget}; keeping the most recent context",
            prompt_ids.len()
        );
        let keep_bos = prompt_ids.first() == Some(&BOS);
        let mut out = Vec::with_capacity(budget);
        if keep_bos {
            out.push(BOS);
        }
        let tail = budget - out.len();
        out.extend_from_slice(&prompt_ids[prompt_ids.len() - tail..]);
        out
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id".into(),
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token plus positional embedding of `ids` at positions `start..`.
    pub fn embed_tokens(&self, tape: &Tape<S>, vars: &BackboneVars, ids: &[usize], start: usize) -> Result<Var> {
        self.check_ids(ids)?;
        let tok = tape.gather(vars.tok_embed, ids)?;
        let positions: Vec<usize> = (start..start + ids.len()).collect();
        let pos = tape.gather(vars.pos_embed, &positions)?;
        tape.add(tok, pos)
    }

    /// `L×D` prompt embedding at positions `0..L`.
    pub fn embed_prompt(&self, tape: &Tape<S>, vars: &BackboneVars, prompt_ids: &[usize]) -> Result<Var> {
        if prompt_ids.is_empty() {
            return Err(Error::contract("prompt must contain at least one token"));
        }
        self.embed_tokens(tape, vars, prompt_ids, 0)
    }

    /// Builds the input rows `prompt ++ memory ++ continuation` and runs the
    /// blocks, returning final hidden states (after the last layer norm).
    pub fn hidden_states(
        &self,
        tape: &Tape<S>,
        vars: &BackboneVars,
        prompt_ids: &[usize],
        memory: Option<Var>,
        continuation: &[usize],
    ) -> Result<Var> {
        let d = self.config.d_model;
        let mut parts = vec![self.embed_prompt(tape, vars, prompt_ids)?];
        let mut pos = prompt_ids.len();
        if let Some(m) = memory {
            let shape = tape.shape(m);
            if shape.len() != 2 || shape[1] != d {
                return Err(Error::contract(format!(
                    "latent memory has shape {shape:?}; columns must equal D={d}"
                )));
            }
            let positions: Vec<usize> = (pos..pos + shape[0]).collect();
            if pos + shape[0] > self.config.max_seq_len {
                return Err(Error::contract(format!(
                    "sequence of {} rows exceeds max_seq_len {}",
                    pos + shape[0],
                    self.config.max_seq_len
                )));
            }
            let pe = tape.gather(vars.pos_embed, &positions)?;
            parts.push(tape.add(m, pe)?);
            pos += shape[0];
        }
        if !continuation.is_empty() {
            parts.push(self.embed_tokens(tape, vars, continuation, pos)?);
        }
        let mut x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        for b in &vars.blocks {
            x = b.apply(tape, x, self.config.n_heads, Mask::Causal)?;
        }
        vars.ln_f.apply(tape, x)
    }

    /// Projects hidden rows onto the vocabulary through the tied embedding.
    pub fn logits(&self, tape: &Tape<S>, vars: &BackboneVars, hidden: Var) -> Result<Var> {
        let et = tape.transpose(vars.tok_embed)?;
        tape.matmul(hidden, et)
    }

    /// Logits for every input row of `prompt ++ memory`, shape `(L+L')×V`.
    pub fn forward_with_memory(
        &self,
        tape: &Tape<S>,
        vars: &BackboneVars,
        prompt_ids: &[usize],
        memory: Option<Var>,
    ) -> Result<Var> {
        let h = self.hidden_states(tape, vars, prompt_ids, memory, &[])?;
        self.logits(tape, vars, h)
    }

    /// Teacher-forced log-probabilities of `output_ids`, shape `[T]`.
    ///
    /// The first output token is predicted from the last prompt-or-memory row.
    pub fn sequence_token_logprobs(
        &self,
        tape: &Tape<S>,
        vars: &BackboneVars,
        prompt_ids: &[usize],
        memory: Option<Var>,
        output_ids: &[usize],
    ) -> Result<Var> {
        if output_ids.is_empty() {
            return Err(Error::contract("output_ids must be nonempty"));
        }
        self.check_ids(output_ids)?;
        let ctx = prompt_ids.len() + memory.map_or(0, |m| tape.shape(m)[0]);
        let t = output_ids.len();
        let h = self.hidden_states(tape, vars, prompt_ids, memory, &output_ids[..t - 1])?;
        let scored = tape.slice_rows(h, ctx - 1, t)?;
        let logits = self.logits(tape, vars, scored)?;
        tape.log_softmax_pick(logits, output_ids)
    }

    /// Mean next-token cross-entropy of `ids` over the positions whose target
    /// is marked in `score` (`score[i]` refers to predicting `ids[i+1]`).
    pub fn masked_lm_loss(&self, tape: &Tape<S>, vars: &BackboneVars, ids: &[usize], score: &[bool]) -> Result<Var> {
        if ids.len() < 2 || score.len() != ids.len() - 1 {
            return Err(Error::contract("masked_lm_loss needs len(score) == len(ids) - 1 >= 1"));
        }
        let rows: Vec<usize> = (0..score.len()).filter(|&i| score[i]).collect();
        if rows.is_empty() {
            return Err(Error::contract("no scored positions"));
        }
        let h = self.hidden_states(tape, vars, &ids[..1], None, &ids[1..ids.len() - 1])?;
        let picked = gather_rows(tape, h, &rows)?;
        let logits = self.logits(tape, vars, picked)?;
        let targets: Vec<usize> = rows.iter().map(|&i| ids[i + 1]).collect();
        tape.cross_entropy(logits, &targets)
    }
}

/// Selects rows by index, batching contiguous runs into slices.
fn gather_rows<S: Scalar>(tape: &Tape<S>, x: Var, rows: &[usize]) -> Result<Var> {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let start = rows[i];
        let mut len = 1;
        while i + len < rows.len() && rows[i + len] == start + len {
            len += 1;
        }
        parts.push(tape.slice_rows(x, start, len)?);
        i += len;
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tokenizer::EOS;

    fn small() -> TransformerConfig {
        TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 32,
            vocab_size: VOCAB_SIZE,
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let c = TransformerConfig { n_heads: 3, ..small() };
        assert!(c.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn bos_embedding_is_token_plus_position() {
        let m = Backbone::<f64>::init(small(), 1).unwrap();
        let tape = Tape::new();
        let v = m.bind(&tape, Binding::Frozen);
        let e = tape.value(m.embed_prompt(&tape, &v, &[BOS]).unwrap());
        assert_eq!(e.shape(), &[1, 8]);
        for j in 0..8 {
            let want = m.params.tok_embed.at(BOS, j) + m.params.pos_embed.at(0, j);
            assert_eq!(e.at(0, j), want);
        }
        let e3 = tape.value(m.embed_prompt(&tape, &v, &[BOS, 7, 9]).unwrap());
        assert_eq!(e3.shape(), &[3, 8]);
    }

    #[test]
    fn swapping_tokens_changes_only_their_rows() {
        let m = Backbone::<f64>::init(small(), 2).unwrap();
        let tape = Tape::new();
        let v = m.bind(&tape, Binding::Frozen);
        let a = tape.value(m.embed_prompt(&tape, &v, &[BOS, 10, 11, 12]).unwrap());
        let b = tape.value(m.embed_prompt(&tape, &v, &[BOS, 12, 11, 10]).unwrap());
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(2), b.row(2));
        assert_ne!(a.row(1), b.row(1));
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn memory_rows_extend_sequence() {
        let m = Backbone::<f64>::init(small(), 3).unwrap();
        let tape = Tape::new();
        let v = m.bind(&tape, Binding::Frozen);
        let prompt = [BOS, 20, 21];
        let plain = m.forward_with_memory(&tape, &v, &prompt, None).unwrap();
        assert_eq!(tape.shape(plain), vec![3, VOCAB_SIZE]);
        let zeros = tape.constant(Tensor::zeros(&[8, 8]));
        let with = m.forward_with_memory(&tape, &v, &prompt, Some(zeros)).unwrap();
        assert_eq!(tape.shape(with), vec![11, VOCAB_SIZE]);
        let a = tape.value(plain);
        let b = tape.value(with);
        assert_ne!(a.row(2), b.row(10));

        let bad = tape.constant(Tensor::zeros(&[8, 4]));
        let err = m.forward_with_memory(&tape, &v, &prompt, Some(bad)).unwrap_err();
        assert!(err.to_string().contains("D=8"), "{err}");
    }

    #[test]
    fn logprob_rows_match_full_forward() {
        let m = Backbone::<f64>::init(small(), 4).unwrap();
        let tape = Tape::new();
        let v = m.bind(&tape, Binding::Frozen);
        let prompt = [BOS, 30, 31];
        let out = [40, 41, EOS];
        let lp = tape.value(m.sequence_token_logprobs(&tape, &v, &prompt, None, &out).unwrap());
        let full: Vec<usize> = prompt.iter().chain(&out).copied().collect();
        let logits = tape.value(m.forward_with_memory(&tape, &v, &full, None).unwrap());
        for t in 0..3 {
            let row = logits.row(prompt.len() - 1 + t);
            let lse = crate::tensor::kernels::log_sum_exp(row);
            assert!((lp.data()[t] - (row[out[t]] - lse)).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_prompt_keeps_bos_and_tail() {
        let m = Backbone::<f32>::init(small(), 5).unwrap();
        let ids: Vec<usize> = std::iter::once(BOS).chain(10..50).collect();
        let fitted = m.fit_prompt(&ids, 22);
        assert_eq!(fitted.len(), 10);
        assert_eq!(fitted[0], BOS);
        assert_eq!(&fitted[1..], &ids[ids.len() - 9..]);
        assert_eq!(m.fit_prompt(&ids[..5], 22), ids[..5].to_vec());
    }

    #[test]
    fn named_round_trip_and_fingerprint() {
        let m = Backbone::<f32>::init(small(), 6).unwrap();
        let map: HashMap<String, Tensor<f32>> = m
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, (**t).clone()))
            .collect();
        let back = Backbone::from_named(small(), map).unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        let other = Backbone::<f32>::init(small(), 7).unwrap();
        assert_ne!(other.fingerprint(), m.fingerprint());
    }
}
