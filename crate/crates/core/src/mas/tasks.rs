//! Synthetic task families with verifiable answers.
//!
//! Every instance belongs to a world: a hidden rule (a key/value table, a
//! string rule, or an operator binding) derived from a world seed. Answers for
//! unseen worlds are only recoverable from stored trajectories of that world.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    KvRecall,
    StringTransform,
    ModArith,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] = [TaskFamily::KvRecall, TaskFamily::StringTransform, TaskFamily::ModArith];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::KvRecall => "kv_recall",
            TaskFamily::StringTransform => "string_transform",
            TaskFamily::ModArith => "mod_arith",
        }
    }

    fn salt(self) -> u64 {
        match self {
            TaskFamily::KvRecall => 0x6b76,
            TaskFamily::StringTransform => 0x7374,
            TaskFamily::ModArith => 0x6d61,
        }
    }

    /// Word the scripted planner emits for this family.
    pub fn plan_word(self) -> &'static str {
        match self {
            TaskFamily::KvRecall => "lookup",
            TaskFamily::StringTransform => "transform",
            TaskFamily::ModArith => "compute",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown task family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::contract(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub family: TaskFamily,
    pub world_id: String,
    pub query: String,
    pub gold: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StringRule {
    Reverse,
    Caesar(u8),
    Duplicate,
}

impl StringRule {
    pub fn apply(self, s: &str) -> String {
        match self {
            StringRule::Reverse => s.chars().rev().collect(),
            StringRule::Caesar(k) => s
                .bytes()
                .map(|b| (b'a' + (b - b'a' + k) % 26) as char)
                .collect(),
            StringRule::Duplicate => format!("{s}{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    pub fn apply(self, a: i64, b: i64, m: i64) -> i64 {
        let v = match self {
            ArithOp::Add => a + b,
            ArithOp::Sub => a - b,
            ArithOp::Mul => a * b,
        };
        v.rem_euclid(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    /// Ordered key/value table; the first `n_train` keys form the train split.
    Table { entries: Vec<(String, String)>, n_train: usize },
    /// String rule addressed by a world tag.
    Strings { tag: String, rule: StringRule },
    /// Operator bound to an opcode word.
    Arith { opword: String, op: ArithOp },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct World {
    pub family: TaskFamily,
    pub seed: u64,
    pub id: String,
    pub rule: Rule,
}

/// Keys per key/value world and how many of them are train keys.
pub const KV_KEYS_PER_WORLD: usize = 6;
pub const KV_TRAIN_KEYS: usize = 4;

fn random_word(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

pub fn kv_query(key: &str) -> String {
    format!("VALUE OF {key}?")
}

impl World {
    pub fn generate(family: TaskFamily, world_seed: u64) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ family.salt());
        let rule = match family {
            TaskFamily::KvRecall => {
                let mut entries: Vec<(String, String)> = Vec::with_capacity(KV_KEYS_PER_WORLD);
                while entries.len() < KV_KEYS_PER_WORLD {
                    let key = random_word(&mut rng, 5);
                    if entries.iter().any(|(k, _)| *k == key) {
                        continue;
                    }
                    entries.push((key, rng.gen_range(0..10).to_string()));
                }
                Rule::Table {
                    entries,
                    n_train: KV_TRAIN_KEYS,
                }
            }
            TaskFamily::StringTransform => {
                let rule = match rng.gen_range(0..3) {
                    0 => StringRule::Reverse,
                    1 => StringRule::Caesar(rng.gen_range(1..=5)),
                    _ => StringRule::Duplicate,
                };
                Rule::Strings {
                    tag: random_word(&mut rng, 4),
                    rule,
                }
            }
            TaskFamily::ModArith => {
                let op = *[ArithOp::Add, ArithOp::Sub, ArithOp::Mul].choose(&mut rng).unwrap();
                Rule::Arith {
                    opword: random_word(&mut rng, 4).to_uppercase(),
                    op,
                }
            }
        };
        World {
            family,
            seed: world_seed,
            id: format!("{}-{world_seed}", family.name()),
            rule,
        }
    }

    fn instance(&self, query: String, gold: String, split: Split) -> TaskInstance {
        TaskInstance {
            family: self.family,
            world_id: self.id.clone(),
            query,
            gold,
            split,
        }
    }

    /// Deterministic `index`-th instance of `split`. Key/value worlds cycle
    /// through their split's keys; the other families draw fresh inputs.
    pub fn task(&self, split: Split, index: usize) -> TaskInstance {
        let mut rng = ChaCha8Rng::seed_from_u64((self.seed << 20) ^ index as u64 ^ self.family.salt());
        match &self.rule {
            Rule::Table { entries, n_train } => {
                let keys = match split {
                    Split::Train => &entries[..*n_train],
                    Split::Eval => &entries[*n_train..],
                };
                let (k, v) = &keys[index % keys.len()];
                self.instance(kv_query(k), v.clone(), split)
            }
            Rule::Strings { tag, rule } => {
                // train strings start with a-m, eval strings with n-z
                let first = match split {
                    Split::Train => rng.gen_range(b'a'..=b'm'),
                    Split::Eval => rng.gen_range(b'n'..=b'z'),
                };
                let len = rng.gen_range(3..=6);
                let mut s = String::with_capacity(len);
                s.push(first as char);
                s.push_str(&random_word(&mut rng, len - 1));
                self.instance(format!("RULE {tag}: {s}"), rule.apply(&s), split)
            }
            Rule::Arith { opword, op } => {
                // train pairs have an even sum, eval pairs an odd one
                let want = match split {
                    Split::Train => 0,
                    Split::Eval => 1,
                };
                let a = rng.gen_range(0..20i64);
                let mut b = rng.gen_range(0..20i64);
                if (a + b) % 2 != want {
                    b = (b + 1) % 20;
                }
                let m = rng.gen_range(2..10i64);
                self.instance(format!("{opword} {a} {b} mod {m}"), op.apply(a, b, m).to_string(), split)
            }
        }
    }

    /// Instance used for scripted reference trajectories: key/value worlds
    /// cycle through all keys, other families use train instances.
    pub fn reference_task(&self, index: usize) -> TaskInstance {
        match &self.rule {
            Rule::Table { entries, n_train } => {
                let i = index % entries.len();
                let split = if i < *n_train { Split::Train } else { Split::Eval };
                let (k, v) = &entries[i];
                self.instance(kv_query(k), v.clone(), split)
            }
            _ => self.task(Split::Train, index),
        }
    }

    /// Number of distinct instances in `split`, when finite.
    pub fn split_size(&self, split: Split) -> Option<usize> {
        match &self.rule {
            Rule::Table { entries, n_train } => Some(match split {
                Split::Train => *n_train,
                Split::Eval => entries.len() - n_train,
            }),
            _ => None,
        }
    }
}

/// The `index`-th task of `split` in the world derived from `world_seed`.
pub fn generate_task(family: TaskFamily, world_seed: u64, split: Split, index: usize) -> TaskInstance {
    World::generate(family, world_seed).task(split, index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_table_answers_its_keys() {
        let w = World {
            family: TaskFamily::KvRecall,
            seed: 0,
            id: "kv_recall-x".into(),
            rule: Rule::Table {
                entries: vec![("red".into(), "7".into())],
                n_train: 1,
            },
        };
        let t = w.task(Split::Train, 0);
        assert_eq!(t.query, "VALUE OF red?");
        assert_eq!(t.gold, "7");
    }

    #[test]
    fn rules_match_hand_results() {
        assert_eq!(StringRule::Reverse.apply("abc"), "cba");
        assert_eq!(StringRule::Caesar(2).apply("xyz"), "zab");
        assert_eq!(StringRule::Duplicate.apply("ab"), "abab");
        assert_eq!(ArithOp::Add.apply(5, 9, 7), 0);
        assert_eq!(ArithOp::Sub.apply(2, 9, 5), 3);
        assert_eq!(ArithOp::Mul.apply(4, 6, 9), 6);
    }

    #[test]
    fn splits_are_disjoint() {
        for seed in 0..20 {
            for family in TaskFamily::ALL {
                let w = World::generate(family, seed);
                let train: Vec<String> = (0..30).map(|i| w.task(Split::Train, i).query).collect();
                for i in 0..30 {
                    let q = w.task(Split::Eval, i).query;
                    assert!(!train.contains(&q), "{family} world {seed}: {q}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_covered() {
        for family in TaskFamily::ALL {
            let a = generate_task(family, 3, Split::Eval, 5);
            assert_eq!(a, generate_task(family, 3, Split::Eval, 5));
            assert!(!a.gold.is_empty());
            assert!(crate::lm::Tokenizer::covers(&a.query) && crate::lm::Tokenizer::covers(&a.gold));
        }
        assert!("nope".parse::<TaskFamily>().is_err());
    }

    #[test]
    fn reference_tasks_cover_every_key() {
        let w = World::generate(TaskFamily::KvRecall, 1);
        let refs: Vec<String> = (0..KV_KEYS_PER_WORLD).map(|i| w.reference_task(i).query).collect();
        for split in [Split::Train, Split::Eval] {
            for i in 0..w.split_size(split).unwrap() {
                assert!(refs.contains(&w.task(split, i).query));
            }
        }
    }
}
