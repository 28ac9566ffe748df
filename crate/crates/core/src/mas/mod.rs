//! Multi-agent systems over the shared backbone: tasks, topologies,
//! episodes and scripted reference data.

pub mod bootstrap;
pub mod episode;
pub mod system;
pub mod tasks;

pub use bootstrap::{bootstrap_bank, pretraining_corpus, reference_trajectory, CorpusConfig};
pub use episode::{compute_reward, execute_episode, plan_memory, run_episode, Episode, EpisodeOptions, EpisodeStep, MemoryPlan};
pub use system::{build_system, MasSystem, Mode, Role, Topology};
pub use tasks::{generate_task, Split, TaskFamily, TaskInstance, World};
