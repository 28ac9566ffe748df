//! Inference-only forward pass with per-layer key/value caches, used for
//! sampling. Shares kernels with the tape ops; training and scoring always
//! go through the tape.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::layers::{BlockParams, LayerNormParams, LN_EPS};
use super::model::Backbone;
use super::tokenizer::EOS;
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, rm, rm_t};
use crate::tensor::{Scalar, Tensor};

/// Running decoder state for one sequence.
pub struct DecodeState<'a, S: Scalar> {
    model: &'a Backbone<S>,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

fn layer_norm<S: Scalar>(x: &[S], ln: &LayerNormParams<S>, d: usize) -> Vec<S> {
    let eps = S::from_f64_lossy(LN_EPS);
    let mut out = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); d];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        kernels::layer_norm_row(row, ln.gain.data(), ln.bias.data(), eps, o, &mut xhat);
    }
    out
}

fn linear<S: Scalar>(x: &[S], rows: usize, w: &Tensor<S>, b: &Tensor<S>) -> Vec<S> {
    let (k, n) = (w.rows(), w.cols());
    let mut y = vec![S::zero(); rows * n];
    kernels::gemm(rows, k, n, x, rm(k), w.data(), rm(n), &mut y, false);
    kernels::add_row_bias(&mut y, b.data());
    y
}

impl<'a, S: Scalar> DecodeState<'a, S> {
    pub fn new(model: &'a Backbone<S>) -> Self {
        let n = model.config.n_layers;
        DecodeState {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Number of rows consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn remaining(&self) -> usize {
        self.model.config.max_seq_len - self.len
    }

    /// Feeds token rows; returns the logits of the last fed row.
    pub fn push_tokens(&mut self, ids: &[usize]) -> Result<Vec<S>> {
        let d = self.model.config.d_model;
        let p = &self.model.params;
        let mut x = Vec::with_capacity(ids.len() * d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.model.config.vocab_size {
                return Err(Error::Index {
                    what: "token id".into(),
                    index: id,
                    bound: self.model.config.vocab_size,
                });
            }
            let pos = self.len + i;
            if pos >= self.model.config.max_seq_len {
                return Err(Error::contract("sequence exceeds max_seq_len"));
            }
            let tok = p.tok_embed.row(id);
            let pe = p.pos_embed.row(pos);
            x.extend(tok.iter().zip(pe).map(|(a, b)| *a + *b));
        }
        self.push_rows(x)
    }

    /// Feeds latent memory rows (already `D` wide) at the next positions.
    pub fn push_memory(&mut self, m: &Tensor<S>) -> Result<Vec<S>> {
        let d = self.model.config.d_model;
        if m.rank() != 2 || m.cols() != d {
            return Err(Error::contract(format!(
                "latent memory has shape {:?}; columns must equal D={d}",
                m.shape()
            )));
        }
        if self.len + m.rows() > self.model.config.max_seq_len {
            return Err(Error::contract("sequence exceeds max_seq_len"));
        }
        let pe = &self.model.params.pos_embed;
        let mut x = Vec::with_capacity(m.numel());
        for r in 0..m.rows() {
            x.extend(m.row(r).iter().zip(pe.row(self.len + r)).map(|(a, b)| *a + *b));
        }
        self.push_rows(x)
    }

    fn push_rows(&mut self, mut x: Vec<S>) -> Result<Vec<S>> {
        let cfg = self.model.config;
        let d = cfg.d_model;
        let n = x.len() / d;
        if n == 0 {
            return Err(Error::contract("no rows to feed"));
        }
        for (l, block) in self.model.params.blocks.iter().enumerate() {
            self.block_step(l, block, &mut x, n);
        }
        self.len += n;
        let last = layer_norm(&x[(n - 1) * d..], &self.model.params.ln_f, d);
        let e = &self.model.params.tok_embed;
        let mut logits = vec![S::zero(); cfg.vocab_size];
        kernels::gemm(1, d, cfg.vocab_size, &last, rm(d), e.data(), rm_t(d), &mut logits, false);
        Ok(logits)
    }

    fn block_step(&mut self, l: usize, b: &BlockParams<S>, x: &mut [S], n: usize) {
        let cfg = self.model.config;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();

        let h = layer_norm(x, &b.ln1, d);
        let q = linear(&h, n, &b.attn.wq, &b.attn.bq);
        self.keys[l].extend(linear(&h, n, &b.attn.wk, &b.attn.bk));
        self.values[l].extend(linear(&h, n, &b.attn.wv, &b.attn.bv));
        let keys = &self.keys[l];
        let values = &self.values[l];

        let mut attn = vec![S::zero(); n * d];
        let mut scores = vec![S::zero(); self.len + n];
        let mut head_out = vec![S::zero(); dh];
        for i in 0..n {
            let visible = self.len + i + 1;
            for hd in 0..cfg.n_heads {
                let off = hd * dh;
                let qrow = &q[i * d + off..i * d + off + dh];
                kernels::gemm(1, dh, visible, qrow, rm(dh), &keys[off..], rm_t(d), &mut scores, false);
                for s in scores[..visible].iter_mut() {
                    *s *= scale;
                }
                kernels::softmax_row(&mut scores[..visible], visible);
                kernels::gemm(1, visible, dh, &scores, rm(visible), &values[off..], rm(d), &mut head_out, false);
                attn[i * d + off..i * d + off + dh].copy_from_slice(&head_out);
            }
        }
        let o = linear(&attn, n, &b.attn.wo, &b.attn.bo);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += *ov;
        }

        let h = layer_norm(x, &b.ln2, d);
        let mut f = linear(&h, n, &b.mlp.w1, &b.mlp.b1);
        for v in f.iter_mut() {
            *v = kernels::gelu(*v);
        }
        let f = linear(&f, n, &b.mlp.w2, &b.mlp.b2);
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += *fv;
        }
    }
}

/// Sampled output tokens with their temperature-1 log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub ids: Vec<usize>,
    pub logprobs: Vec<f64>,
}

/// Picks the next token. Temperature 0 is argmax with ties to the lowest id.
pub fn choose_token(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    WeightedIndex::new(&weights)
        .expect("softmax weights are positive")
        .sample(rng)
}

/// Autoregressive sampling until `EOS`, `max_tokens`, or the context limit.
pub fn sample_completion<S: Scalar>(
    model: &Backbone<S>,
    prompt_ids: &[usize],
    memory: Option<&Tensor<S>>,
    temperature: f64,
    max_tokens: usize,
    rng: &mut impl Rng,
) -> Result<Completion> {
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::contract("temperature must be >= 0"));
    }
    if max_tokens == 0 {
        return Err(Error::contract("max_tokens must be >= 1"));
    }
    let mut state = DecodeState::new(model);
    let mut logits = state.push_tokens(prompt_ids)?;
    if let Some(m) = memory {
        logits = state.push_memory(m)?;
    }
    let mut out = Completion {
        ids: Vec::new(),
        logprobs: Vec::new(),
    };
    loop {
        let row: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap()).collect();
        let tok = choose_token(&row, temperature, rng);
        out.logprobs.push(row[tok] - kernels::log_sum_exp(&row));
        out.ids.push(tok);
        if tok == EOS || out.ids.len() >= max_tokens || state.remaining() == 0 {
            break;
        }
        logits = state.push_tokens(&[tok])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::layers::Binding;
    use crate::lm::model::TransformerConfig;
    use crate::lm::tokenizer::{BOS, VOCAB_SIZE};
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Backbone<f64> {
        let cfg = TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 40,
            vocab_size: VOCAB_SIZE,
        };
        Backbone::init(cfg, 11).unwrap()
    }

    #[test]
    fn cached_logits_match_tape_forward() {
        let m = model();
        let prompt = [BOS, 40, 41, 42];
        let mem = Tensor::randn(&[3, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let cont = [50, 51];

        let tape = Tape::new();
        let v = m.bind(&tape, Binding::Frozen);
        let mv = tape.constant(mem.clone());
        let h = m.hidden_states(&tape, &v, &prompt, Some(mv), &cont).unwrap();
        let full = tape.value(m.logits(&tape, &v, h).unwrap());

        let mut st = DecodeState::new(&m);
        st.push_tokens(&prompt).unwrap();
        let after_mem = st.push_memory(&mem).unwrap();
        for (a, b) in after_mem.iter().zip(full.row(6)) {
            assert!((a - b).abs() < 1e-10);
        }
        st.push_tokens(&cont[..1]).unwrap();
        let last = st.push_tokens(&cont[1..]).unwrap();
        for (a, b) in last.iter().zip(full.row(8)) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(st.len(), 9);
    }

    #[test]
    fn argmax_ties_go_to_lowest_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(choose_token(&[1.0, 3.0, 3.0, 0.0], 0.0, &mut rng), 1);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = model();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_completion(&m, &[BOS, 30], None, 1.0, 12, &mut rng).unwrap()
        };
        assert_eq!(run(5), run(5));
        assert!(run(5).ids.len() <= 12);
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_completion(&m, &[BOS], None, -1.0, 4, &mut rng).is_err());
        assert!(sample_completion(&m, &[BOS], None, 1.0, 0, &mut rng).is_err());
    }
}
