#![allow(dead_code)]

use latentmem::bank::{Trajectory, TrajectoryStep};
use latentmem::lm::tokenizer::VOCAB_SIZE;
use latentmem::tensor::Tensor;
use rand::Rng;

/// Token id of a printable ASCII character, computed from the vocabulary
/// layout (specials first, then codes 32..=126).
pub fn ascii_id(c: char) -> usize {
    VOCAB_SIZE - 95 + (c as usize - 32)
}

/// Unit mean embedding of `text` from per-character counts, or `None` when
/// empty or zero.
pub fn oracle_embed(table: &Tensor<f32>, text: &str) -> Option<Vec<f64>> {
    let d = table.cols();
    let n = text.chars().count();
    if n == 0 {
        return None;
    }
    let mut counts = vec![0usize; VOCAB_SIZE];
    for c in text.chars() {
        counts[ascii_id(c)] += 1;
    }
    let mut v = vec![0.0f64; d];
    for (id, &k) in counts.iter().enumerate() {
        if k == 0 {
            continue;
        }
        for (j, acc) in v.iter_mut().enumerate() {
            *acc += k as f64 * table.data()[id * d + j] as f64;
        }
    }
    v.iter_mut().for_each(|x| *x /= n as f64);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

fn cosine(u: &[f64], w: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (nu * nw)
}

/// Indices of the `k` best entries by exhaustive cosine scan, ties to the
/// lower index.
pub fn oracle_topk(table: &Tensor<f32>, budget: usize, entries: &[Trajectory], query: &str, k: usize) -> Vec<usize> {
    let Some(q) = oracle_embed(table, query) else {
        return Vec::new();
    };
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for (i, t) in entries.iter().enumerate() {
        let mut text = t.query.clone();
        for s in &t.steps {
            text.push(' ');
            text.push_str(&s.output);
        }
        let text: String = text.chars().take(budget).collect();
        if let Some(e) = oracle_embed(table, &text) {
            scored.push((cosine(&q, &e), i));
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn random_word(rng: &mut impl Rng, alphabet: &[u8], len: usize) -> String {
    (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char).collect()
}

/// Random trajectory over a small alphabet so that duplicates (exact ties)
/// are common.
pub fn random_trajectory(rng: &mut impl Rng) -> Trajectory {
    let alphabet = b"abc xyz019";
    let steps = (0..rng.gen_range(1..=3))
        .map(|j| {
            let n = rng.gen_range(0..4);
            TrajectoryStep {
                agent_idx: j,
                prompt: random_word(rng, alphabet, 6),
                output: random_word(rng, alphabet, n),
            }
        })
        .collect();
    let n = rng.gen_range(1..5);
    Trajectory {
        id: 0,
        query: random_word(rng, alphabet, n),
        steps,
        reward: Some(rng.gen_range(0..=1) as f32),
        task_tag: "kv_recall".into(),
    }
}
