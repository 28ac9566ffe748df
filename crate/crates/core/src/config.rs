//! Flat `key = value` run configuration.
//!
//! Every tunable lives in [`RunConfig`]. Values are layered: defaults, then
//! the config file, then `LATENTMEM_SEED`, then command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::composer::ComposerConfig;
use crate::error::{Error, Result};
use crate::lm::pretrain::PretrainConfig;
use crate::lm::tokenizer::VOCAB_SIZE;
use crate::lm::TransformerConfig;
use crate::lmpo::LmpoConfig;
use crate::mas::{CorpusConfig, EpisodeOptions, Mode, TaskFamily, Topology};

pub const SEED_ENV: &str = "LATENTMEM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tag: String,
    pub runs_dir: String,
    /// Worker threads; 0 uses every core.
    pub workers: usize,

    // backbone
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,

    // pretraining
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_warmup_ratio: f64,
    pub corpus_lines: usize,
    pub corpus_worlds: u64,

    // composer
    pub latent_len: usize,
    pub composer_layers: usize,
    pub composer_heads: usize,
    pub composer_d_ff: usize,
    pub composer_context: usize,
    /// Replace every role profile with a placeholder.
    pub ablate_roles: bool,

    // experience bank
    pub top_k: usize,
    pub bank_embed_chars: usize,
    pub bank_updates: bool,
    /// Trajectories below this reward are not stored; `none` stores all.
    pub bank_min_reward: Option<f64>,
    pub bank_per_world: usize,

    // tasks and system
    pub families: String,
    pub topology: String,
    pub mode: String,
    pub n_worlds: u64,
    pub world_offset: u64,
    pub train_per_world: usize,
    pub eval_per_world: usize,
    pub max_new_tokens: usize,
    pub raw_context_chars: usize,

    // optimization
    pub group_size: usize,
    pub clip_eps: f64,
    pub adv_eps: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub train_temperature: f64,
    pub eval_temperature: f64,
    pub epochs_per_batch: usize,
    pub macro_batch: usize,
    pub kl_weight: f64,
    pub total_steps: usize,
    pub warmup_ratio: f64,
    pub eval_every: usize,
    pub eval_wave: usize,
    pub checkpoint_every: usize,

    // inputs from earlier runs; empty means "not given"
    pub backbone_path: String,
    pub bank_path: String,
    pub composer_path: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lmpo = LmpoConfig::default();
        let composer = ComposerConfig::default();
        let backbone = TransformerConfig::default();
        RunConfig {
            seed: 0,
            tag: "run".into(),
            runs_dir: "runs".into(),
            workers: 1,
            n_layers: backbone.n_layers,
            n_heads: backbone.n_heads,
            d_model: backbone.d_model,
            d_ff: backbone.d_ff,
            max_seq_len: backbone.max_seq_len,
            pretrain_steps: 1500,
            pretrain_batch: 16,
            pretrain_lr: 3e-3,
            pretrain_warmup_ratio: 0.05,
            corpus_lines: 6000,
            corpus_worlds: 2000,
            latent_len: composer.latent_len,
            composer_layers: composer.n_layers,
            composer_heads: composer.n_heads,
            composer_d_ff: composer.d_ff,
            composer_context: composer.context_budget,
            ablate_roles: false,
            top_k: 1,
            bank_embed_chars: 16,
            bank_updates: true,
            bank_min_reward: None,
            bank_per_world: 6,
            families: "kv_recall".into(),
            topology: "chain2".into(),
            mode: "latentmem".into(),
            n_worlds: 20,
            world_offset: 0,
            train_per_world: 4,
            eval_per_world: 2,
            max_new_tokens: 24,
            raw_context_chars: 384,
            group_size: lmpo.group_size,
            clip_eps: lmpo.clip_eps,
            adv_eps: lmpo.adv_eps,
            learning_rate: lmpo.learning_rate,
            beta1: lmpo.beta1,
            beta2: lmpo.beta2,
            adam_eps: lmpo.adam_eps,
            weight_decay: lmpo.weight_decay,
            grad_clip_norm: lmpo.grad_clip_norm,
            train_temperature: lmpo.train_temperature,
            eval_temperature: lmpo.eval_temperature,
            epochs_per_batch: lmpo.epochs_per_batch,
            macro_batch: lmpo.macro_batch,
            kl_weight: lmpo.kl_weight,
            total_steps: lmpo.total_steps,
            warmup_ratio: lmpo.warmup_ratio,
            eval_every: lmpo.eval_every,
            eval_wave: lmpo.eval_wave,
            checkpoint_every: lmpo.checkpoint_every,
            backbone_path: String::new(),
            bank_path: String::new(),
            composer_path: String::new(),
        }
    }
}

fn defaults_map() -> Map<String, Value> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

/// Valid key closest to `key` by edit distance, if reasonably close.
pub fn suggest_key(key: &str) -> Option<String> {
    defaults_map()
        .keys()
        .map(|k| (strsim::levenshtein(key, k), k))
        .filter(|(d, k)| *d <= 3.max(k.len() / 3))
        .min()
        .map(|(_, k)| k.clone())
}

/// Parses `raw` with the JSON type of the default at `key`.
fn typed_value(key: &str, raw: &str, template: &Value) -> Result<Value> {
    let raw = raw.trim();
    let bad = |m: String| Error::BadValue {
        key: key.to_string(),
        message: m,
    };
    match template {
        Value::Bool(_) => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(bad(format!("expected true or false, got `{raw}`"))),
        },
        Value::Number(n) if n.is_u64() => raw
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| bad(format!("expected a non-negative integer, got `{raw}`"))),
        Value::Number(_) | Value::Null => {
            if template.is_null() && (raw.is_empty() || raw == "none") {
                return Ok(Value::Null);
            }
            let v: f64 = raw.parse().map_err(|_| bad(format!("expected a number, got `{raw}`")))?;
            if !v.is_finite() {
                return Err(bad(format!("expected a finite number, got `{raw}`")));
            }
            Ok(Value::from(v))
        }
        Value::String(_) => Ok(Value::String(raw.trim_matches('"').to_string())),
        _ => Err(bad("unsupported value type".into())),
    }
}

fn split_assignment(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl RunConfig {
    /// Layers defaults, `text` (config-file syntax), the seed environment
    /// variable and `overrides` (`key=value` strings), then validates.
    pub fn resolve(text: &str, source: &Path, env_seed: Option<&str>, overrides: &[String]) -> Result<Self> {
        let defaults = defaults_map();
        let mut values = defaults.clone();
        let mut set = |key: &str, raw: &str, at: Option<usize>| -> Result<()> {
            let v = match defaults.get(key) {
                Some(template) => typed_value(key, raw, template),
                None => Err(Error::UnknownKey {
                    key: key.to_string(),
                    suggestion: suggest_key(key),
                }),
            }
            .map_err(|e| match at {
                Some(line) => Error::parse(source, line, e.to_string()),
                None => e,
            })?;
            values.insert(key.to_string(), v);
            Ok(())
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line)
                .ok_or_else(|| Error::parse(source, i + 1, format!("expected `key = value`, got `{line}`")))?;
            set(k, v, Some(i + 1))?;
        }
        if let Some(seed) = env_seed {
            set("seed", seed, None)?;
        }
        for o in overrides {
            let (k, v) = split_assignment(o)
                .ok_or_else(|| Error::validation(format!("override `{o}` is not key=value")))?;
            set(k, v, None)?;
        }
        let config: RunConfig = serde_json::from_value(Value::Object(values))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (if given) and applies the environment and overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, source) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                p.to_path_buf(),
            ),
            None => (String::new(), "<defaults>".into()),
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(&text, &source, env.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer_config().validate()?;
        self.lmpo_config().validate()?;
        self.mode()?;
        self.topology()?;
        self.families()?;
        let bad = |m: &str| Err(Error::validation(m.to_string()));
        if self.top_k == 0 || self.latent_len == 0 || self.max_new_tokens == 0 {
            return bad("top_k, latent_len and max_new_tokens must be positive");
        }
        if self.n_worlds == 0 || self.bank_per_world == 0 || self.eval_per_world == 0 {
            return bad("n_worlds, bank_per_world and eval_per_world must be positive");
        }
        if self.composer_heads == 0 || self.d_model % self.composer_heads != 0 {
            return bad("composer_heads must divide d_model");
        }
        if self.tag.is_empty() || self.tag.contains(['/', '\\']) {
            return bad("tag must be a nonempty file-name fragment");
        }
        Ok(())
    }

    /// `key = value` lines in key order; loading the echo reproduces `self`.
    pub fn echo(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else {
            unreachable!("RunConfig serializes to an object")
        };
        let mut keys: Vec<&String> = map.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let v = match &map[k] {
                Value::String(s) => s.clone(),
                Value::Null => "none".into(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            vocab_size: VOCAB_SIZE,
        }
    }

    pub fn composer_config(&self) -> ComposerConfig {
        ComposerConfig {
            latent_len: self.latent_len,
            context_budget: self.composer_context,
            n_layers: self.composer_layers,
            n_heads: self.composer_heads,
            d_ff: self.composer_d_ff,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            warmup_ratio: self.pretrain_warmup_ratio,
            seed: self.seed,
            ..PretrainConfig::default()
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            lines: self.corpus_lines,
            slot_len: self.latent_len,
            worlds: self.corpus_worlds,
            ..CorpusConfig::default()
        }
    }

    pub fn lmpo_config(&self) -> LmpoConfig {
        LmpoConfig {
            group_size: self.group_size,
            clip_eps: self.clip_eps,
            adv_eps: self.adv_eps,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip_norm: self.grad_clip_norm,
            train_temperature: self.train_temperature,
            eval_temperature: self.eval_temperature,
            epochs_per_batch: self.epochs_per_batch,
            macro_batch: self.macro_batch,
            kl_weight: self.kl_weight,
            total_steps: self.total_steps,
            warmup_ratio: self.warmup_ratio,
            eval_every: self.eval_every,
            eval_wave: self.eval_wave,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn episode_options(&self) -> EpisodeOptions {
        EpisodeOptions {
            top_k: self.top_k,
            temperature: self.eval_temperature,
            max_new_tokens: self.max_new_tokens,
            raw_context_chars: self.raw_context_chars,
        }
    }

    pub fn mode(&self) -> Result<Mode> {
        self.mode.parse()
    }

    pub fn topology(&self) -> Result<Topology> {
        self.topology.parse()
    }

    /// Comma-separated family list.
    pub fn families(&self) -> Result<Vec<TaskFamily>> {
        let fams: Vec<TaskFamily> = self
            .families
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if fams.is_empty() {
            return Err(Error::validation("families must name at least one task family"));
        }
        Ok(fams)
    }

    /// World seeds `world_offset..world_offset + n_worlds`.
    pub fn worlds(&self) -> Vec<u64> {
        (self.world_offset..self.world_offset + self.n_worlds).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::resolve(text, Path::new("test.conf"), None, &o)
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = resolve("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.latent_len, c.top_k, c.clip_eps), (8, 1, 0.2));
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!(c.kl_weight, 0.0);
    }

    #[test]
    fn layering_and_comments() {
        let c = resolve("# demo\ngroup_size = 4  # small\nmode = no_memory\n", &["group_size=8"]).unwrap();
        assert_eq!(c.group_size, 8);
        assert_eq!(c.mode().unwrap(), Mode::NoMemory);
        let s = RunConfig::resolve("seed = 3", Path::new("x"), Some("11"), &[]).unwrap();
        assert_eq!(s.seed, 11);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = resolve("grop_size = 8", &[]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(err.to_string().contains("did you mean `group_size`"), "{err}");
        let err = resolve("", &["grop_size=8".into()]).unwrap_err();
        match &err {
            Error::UnknownKey { key, suggestion } => {
                assert_eq!(key, "grop_size");
                assert_eq!(suggestion.as_deref(), Some("group_size"));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err.to_string().contains("group_size"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(resolve("group_size = many", &[]).is_err());
        assert!(resolve("kl_weight = 0.1", &[]).is_err());
        assert!(resolve("group_size = 1", &[]).is_err());
        assert!(resolve("just words", &[]).is_err());
        assert!(resolve("mode = sideways", &[]).is_err());
        let c = resolve("bank_min_reward = 0.5", &[]).unwrap();
        assert_eq!(c.bank_min_reward, Some(0.5));
    }

    #[test]
    fn echo_round_trips() {
        let c = resolve("", &["learning_rate=0.002", "tag=demo", "bank_min_reward=1"]).unwrap();
        let back = resolve(&c.echo(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
