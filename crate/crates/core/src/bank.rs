//! Append-only experience bank with bag-of-tokens cosine retrieval.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Tokenizer;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub agent_idx: u32,
    pub prompt: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub query: String,
    pub steps: Vec<TrajectoryStep>,
    pub reward: Option<f32>,
    pub task_tag: String,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::validation(format!("trajectory {} has no steps", self.id)));
        }
        if let Some(r) = self.reward {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::validation(format!(
                    "trajectory {} has reward {r} outside [0, 1]",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn final_output(&self) -> &str {
        self.steps.last().map_or("", |s| s.output.as_str())
    }

    /// Query followed by every step output, space separated.
    pub fn embedding_text(&self) -> String {
        let mut s = self.query.clone();
        for step in &self.steps {
            s.push(' ');
            s.push_str(&step.output);
        }
        s
    }
}

/// Maps text to the normalized mean of its token embedding rows.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    table: Arc<Tensor<f32>>,
    /// Characters of trajectory text kept for embedding.
    pub char_budget: usize,
}

impl TextEmbedder {
    pub fn new(table: Arc<Tensor<f32>>, char_budget: usize) -> Self {
        TextEmbedder { table, char_budget }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Unit vector, or `None` for empty text (not retrievable).
    pub fn embed(&self, text: &str) -> Option<Vec<f64>> {
        let ids = Tokenizer.encode(text);
        if ids.is_empty() {
            return None;
        }
        // summing by token id makes texts with equal character counts embed
        // bit-identically, so their similarity ties are exact
        let mut counts = vec![0usize; self.table.rows()];
        for &id in &ids {
            counts[id] += 1;
        }
        let d = self.dim();
        let mut v = vec![0.0f64; d];
        for (id, &n) in counts.iter().enumerate().filter(|(_, n)| **n > 0) {
            for (acc, x) in v.iter_mut().zip(self.table.row(id)) {
                *acc += n as f64 * *x as f64;
            }
        }
        for x in v.iter_mut() {
            *x /= ids.len() as f64;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Some(v)
    }

    pub fn embed_trajectory(&self, t: &Trajectory) -> Option<Vec<f64>> {
        let text: String = t.embedding_text().chars().take(self.char_budget).collect();
        self.embed(&text)
    }
}

pub fn cosine_sim(u: &[f64], w: &[f64]) -> Result<f64> {
    if u.len() != w.len() {
        return Err(Error::Shape {
            op: "cosine_sim".into(),
            lhs: vec![u.len()],
            rhs: vec![w.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nw == 0.0 {
        return Err(Error::contract("cosine similarity of a zero vector"));
    }
    let dot: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nw))
}

#[derive(Debug, Clone)]
pub struct ExperienceBank {
    entries: Vec<Trajectory>,
    embeddings: Vec<Option<Vec<f64>>>,
    embedder: TextEmbedder,
    initial_capacity: usize,
    /// When false, [`append`](Self::append) is a logged no-op.
    pub updates_enabled: bool,
    /// Trajectories with a reward below this are not stored.
    pub min_reward: Option<f32>,
}

/// One retrieval hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub similarity: f64,
}

impl ExperienceBank {
    pub fn new(embedder: TextEmbedder) -> Self {
        ExperienceBank {
            entries: Vec::new(),
            embeddings: Vec::new(),
            embedder,
            initial_capacity: 0,
            updates_enabled: true,
            min_reward: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Trajectory] {
        &self.entries
    }

    pub fn embedding(&self, index: usize) -> Option<&[f64]> {
        self.embeddings.get(index).and_then(|e| e.as_deref())
    }

    pub fn embedder(&self) -> &TextEmbedder {
        &self.embedder
    }

    /// Entry count recorded by the last [`mark_initialized`](Self::mark_initialized).
    pub fn initial_capacity(&self) -> usize {
        self.initial_capacity
    }

    pub fn mark_initialized(&mut self) {
        self.initial_capacity = self.entries.len();
    }

    /// Unconditional insert used by bootstrapping and loading. The stored id
    /// is the entry position.
    fn insert(&mut self, mut t: Trajectory) -> Result<()> {
        t.validate()?;
        t.id = self.entries.len() as u64;
        self.embeddings.push(self.embedder.embed_trajectory(&t));
        self.entries.push(t);
        Ok(())
    }

    /// Adds a finished trajectory. Returns whether it was stored.
    pub fn append(&mut self, t: Trajectory) -> Result<bool> {
        t.validate()?;
        if !self.updates_enabled {
            log::debug!("bank updates disabled; skipping trajectory for {:?}", t.query);
            return Ok(false);
        }
        if let (Some(min), Some(r)) = (self.min_reward, t.reward) {
            if r < min {
                return Ok(false);
            }
        }
        self.insert(t)?;
        Ok(true)
    }

    /// Seeds the bank regardless of the update toggle.
    pub fn seed(&mut self, t: Trajectory) -> Result<()> {
        self.insert(t)
    }

    /// Top-`k` entries by cosine similarity to `query`, descending, ties to
    /// the older entry.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::contract("K must be at least 1"));
        }
        let Some(q) = self.embedder.embed(query) else {
            return Ok(Vec::new());
        };
        let mut hits = Vec::with_capacity(self.entries.len());
        for (index, e) in self.embeddings.iter().enumerate() {
            if let Some(e) = e {
                hits.push(Hit {
                    index,
                    similarity: cosine_sim(&q, e)?,
                });
            }
        }
        hits.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(a.index.cmp(&b.index))
        });
        hits.truncate(k);
        Ok(hits)
    }

    pub fn retrieve_topk(&self, query: &str, k: usize) -> Result<Vec<Trajectory>> {
        Ok(self
            .retrieve(query, k)?
            .into_iter()
            .map(|h| self.entries[h.index].clone())
            .collect())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.entries {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads entries and recomputes embeddings; the loaded count becomes the
    /// initial capacity.
    pub fn load_jsonl(path: &Path, embedder: TextEmbedder) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bank = ExperienceBank::new(embedder);
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let t: Trajectory = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let id = t.id;
            bank.insert(t).map_err(|e| parse_err(e.to_string()))?;
            bank.entries.last_mut().unwrap().id = id;
        }
        bank.mark_initialized();
        Ok(bank)
    }
}

/// Serializes retrieved trajectories for the composer, dropping the oldest
/// steps first when over `char_budget`.
pub fn render_context(trajectories: &[Trajectory], char_budget: usize) -> String {
    // (trajectory number, header, step lines)
    let mut blocks: Vec<(String, Vec<String>)> = trajectories
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let steps = t
                .steps
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    format!(
                        "[STEP {} agent {}] PROMPT:{} OUTPUT:{}\n",
                        j + 1,
                        s.agent_idx,
                        s.prompt,
                        s.output
                    )
                })
                .collect();
            (format!("[TRAJ {}]\n", k + 1), steps)
        })
        .collect();
    let total = |blocks: &[(String, Vec<String>)]| -> usize {
        blocks
            .iter()
            .map(|(h, s)| h.chars().count() + s.iter().map(|l| l.chars().count()).sum::<usize>())
            .sum()
    };
    let mut size = total(&blocks);
    while size > char_budget && !blocks.is_empty() {
        let multi = blocks.len() > 1;
        let (header, steps) = &mut blocks[0];
        let header_len = header.chars().count();
        if steps.len() > 1 || (steps.len() == 1 && multi) {
            size -= steps.remove(0).chars().count();
            if steps.is_empty() {
                size -= header_len;
                blocks.remove(0);
            }
            continue;
        }
        // a single remaining step: keep its most recent characters
        let keep = char_budget.saturating_sub(header_len);
        if let Some(line) = steps.first_mut() {
            let n = line.chars().count();
            *line = line.chars().skip(n.saturating_sub(keep)).collect();
        }
        size = total(&blocks);
        if size > char_budget {
            blocks.clear();
            size = 0;
        }
    }
    let mut out = String::with_capacity(size);
    for (h, steps) in blocks {
        out.push_str(&h);
        for s in steps {
            out.push_str(&s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(a: u32, p: &str, o: &str) -> TrajectoryStep {
        TrajectoryStep {
            agent_idx: a,
            prompt: p.into(),
            output: o.into(),
        }
    }

    fn traj(q: &str, outs: &[&str]) -> Trajectory {
        Trajectory {
            id: 0,
            query: q.into(),
            steps: outs.iter().enumerate().map(|(i, o)| step(i as u32, q, o)).collect(),
            reward: Some(1.0),
            task_tag: "t".into(),
        }
    }

    fn embedder() -> TextEmbedder {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        TextEmbedder::new(Arc::new(Tensor::randn(&[crate::lm::tokenizer::VOCAB_SIZE, 16], 1.0, &mut rng)), 512)
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-15);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn embedding_is_bag_of_tokens() {
        let e = embedder();
        let a = e.embed("aaaa").unwrap();
        let row = e.embed("a").unwrap();
        for (x, y) in a.iter().zip(&row) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(e.embed("abc"), e.embed("cab"));
        let n: f64 = e.embed("hello").unwrap().iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(e.embed("").is_none());
    }

    #[test]
    fn append_then_retrieve() {
        let mut b = ExperienceBank::new(embedder());
        assert!(b.retrieve_topk("x", 1).unwrap().is_empty());
        b.append(traj("VALUE OF abc?", &["7"])).unwrap();
        assert_eq!(b.len(), 1);
        let got = b.retrieve_topk("VALUE OF abc?", 1).unwrap();
        assert_eq!(got[0].query, "VALUE OF abc?");
        b.updates_enabled = false;
        assert!(!b.append(traj("q", &["1"])).unwrap());
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn min_reward_filter() {
        let mut b = ExperienceBank::new(embedder());
        b.min_reward = Some(0.5);
        let mut t = traj("q", &["1"]);
        t.reward = Some(0.0);
        assert!(!b.append(t).unwrap());
        assert!(b.append(traj("q", &["1"])).unwrap());
    }

    #[test]
    fn render_examples() {
        assert_eq!(render_context(&[], 100), "");
        let one = render_context(&[traj("q", &["o"])], 1000);
        assert_eq!(one.matches("[TRAJ").count(), 1);
        assert_eq!(one.matches("[STEP").count(), 1);
        assert_eq!(one, "[TRAJ 1]\n[STEP 1 agent 0] PROMPT:q OUTPUT:o\n");
    }

    #[test]
    fn render_drops_oldest_steps_first() {
        let ts = [traj("first", &["a", "b"]), traj("second", &["c"])];
        let full = render_context(&ts, 10_000);
        let cut = render_context(&ts, full.chars().count() - 5);
        assert!(!cut.contains("OUTPUT:a"));
        assert!(cut.contains("OUTPUT:b") && cut.contains("OUTPUT:c"));
        let tiny = render_context(&ts, 20);
        assert!(tiny.chars().count() <= 20);
        assert!(tiny.ends_with("OUTPUT:c\n"));
    }

    #[test]
    fn jsonl_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jsonl");
        let mut b = ExperienceBank::new(embedder());
        for i in 0..5 {
            b.append(traj(&format!("q{i}"), &["x", "y"])).unwrap();
        }
        b.save_jsonl(&path).unwrap();
        let back = ExperienceBank::load_jsonl(&path, embedder()).unwrap();
        assert_eq!(back.entries(), b.entries());
        assert_eq!(back.initial_capacity(), 5);
        for i in 0..5 {
            assert_eq!(back.embedding(i), b.embedding(i));
        }

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"id\": 9, \"query\": \"q\", \"reward\": null, \"task_tag\": \"t\"}\n");
        std::fs::write(&path, text).unwrap();
        let err = ExperienceBank::load_jsonl(&path, embedder()).unwrap_err();
        assert!(err.to_string().contains("line 6"), "{err}");
    }
}
