//! End-to-end steps driven by a [`RunConfig`]: pretraining, bank setup,
//! training and evaluation. The CLI and the acceptance tests both go
//! through here.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::bank::{ExperienceBank, TextEmbedder};
use crate::checkpoint;
use crate::composer::Composer;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lm::pretrain::{pretrain_backbone, PretrainReport};
use crate::lm::Backbone;
use crate::lmpo::{derive_seed, evaluate, train_loop, EvalReport, TrainSetup, TrainSummary};
use crate::mas::{bootstrap_bank, build_system, generate_task, pretraining_corpus, MasSystem, Mode, Split, TaskInstance};
use crate::metrics::{MetricsRow, MetricsWriter};

/// `<runs_dir>/<timestamp>-<tag>/`, created.
pub fn create_run_dir(config: &RunConfig) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = Path::new(&config.runs_dir).join(format!("{stamp}-{}", config.tag));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = PathBuf::from(format!("{}-{n}", base.display()));
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Writes the resolved configuration as `config.txt`.
pub fn write_resolved_config(config: &RunConfig, dir: &Path) -> Result<()> {
    let p = dir.join("config.txt");
    std::fs::write(&p, config.echo()).map_err(|e| Error::io(&p, e))
}

/// Every configured family and world, `per_world` instances each.
pub fn tasks(config: &RunConfig, split: Split, per_world: usize) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for family in config.families()? {
        for world in config.worlds() {
            for i in 0..per_world {
                out.push(generate_task(family, world, split, i));
            }
        }
    }
    Ok(out)
}

pub fn train_tasks(config: &RunConfig) -> Result<Vec<TaskInstance>> {
    tasks(config, Split::Train, config.train_per_world)
}

pub fn eval_tasks(config: &RunConfig) -> Result<Vec<TaskInstance>> {
    tasks(config, Split::Eval, config.eval_per_world)
}

/// Fresh backbone pretrained on the synthetic corpus.
pub fn pretrain(config: &RunConfig) -> Result<(Backbone<f32>, PretrainReport)> {
    let mut model = Backbone::<f32>::init(config.transformer_config(), config.seed)?;
    let corpus = pretraining_corpus(&config.corpus_config(), derive_seed(config.seed, 1));
    let report = pretrain_backbone(&mut model, &corpus, &config.pretrain_config())?;
    Ok((model, report))
}

pub fn load_backbone(config: &RunConfig) -> Result<Backbone<f32>> {
    if config.backbone_path.is_empty() {
        return Err(Error::validation("backbone_path is not set; run `pretrain` first"));
    }
    checkpoint::load_backbone(Path::new(&config.backbone_path))
}

pub fn embedder(config: &RunConfig, backbone: &Backbone<f32>) -> TextEmbedder {
    TextEmbedder::new(Arc::clone(&backbone.params.tok_embed), config.bank_embed_chars)
}

/// Loads `bank_path` if set, else bootstraps from reference trajectories.
/// Update settings come from the config.
pub fn initial_bank(config: &RunConfig, backbone: &Backbone<f32>) -> Result<ExperienceBank> {
    let emb = embedder(config, backbone);
    let mut bank = if config.bank_path.is_empty() {
        bootstrap_bank(
            &config.families()?,
            &config.worlds(),
            config.bank_per_world,
            config.topology()?,
            emb,
        )?
    } else {
        ExperienceBank::load_jsonl(Path::new(&config.bank_path), emb)?
    };
    bank.updates_enabled = config.bank_updates;
    bank.min_reward = config.bank_min_reward.map(|r| r as f32);
    Ok(bank)
}

pub fn system(config: &RunConfig, mode: Mode) -> Result<MasSystem> {
    let s = build_system(&config.topology, mode)?;
    Ok(if config.ablate_roles { s.without_roles() } else { s })
}

/// Loads `composer_path` if set, else a fresh composer.
pub fn composer(config: &RunConfig, backbone: &Backbone<f32>) -> Result<Composer<f32>> {
    if config.composer_path.is_empty() {
        Composer::init(config.composer_config(), backbone, derive_seed(config.seed, 2))
    } else {
        checkpoint::load_composer(Path::new(&config.composer_path), backbone)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub composer: Composer<f32>,
    pub bank: ExperienceBank,
    pub summary: TrainSummary,
    pub metrics: Vec<MetricsRow>,
}

/// Trains a composer. With `dir`, writes `metrics.csv`, the starting bank
/// as `bank.jsonl`, and composer checkpoints under `checkpoints/`.
pub fn train(config: &RunConfig, backbone: &Backbone<f32>, dir: Option<&Path>) -> Result<TrainOutcome> {
    let mode = config.mode()?;
    if mode != Mode::Latentmem {
        return Err(Error::validation("training needs mode = latentmem"));
    }
    let sys = system(config, mode)?;
    let train = train_tasks(config)?;
    let eval = eval_tasks(config)?;
    let mut bank = initial_bank(config, backbone)?;
    let mut composer = composer(config, backbone)?;
    let mut metrics = match dir {
        Some(d) => {
            bank.save_jsonl(&d.join("bank.jsonl"))?;
            MetricsWriter::create(&d.join("metrics.csv"))?
        }
        None => MetricsWriter::in_memory(),
    };
    let setup = TrainSetup {
        system: &sys,
        backbone,
        train_tasks: &train,
        eval_tasks: &eval,
        config: config.lmpo_config(),
        episode: config.episode_options(),
        checkpoint_dir: dir.map(|d| d.join("checkpoints")),
    };
    let summary = train_loop(&setup, &mut composer, &mut bank, &mut metrics)?;
    Ok(TrainOutcome {
        composer,
        bank,
        summary,
        metrics: metrics.rows().to_vec(),
    })
}

/// Evaluates `mode` on the eval split. The bank (bootstrapped or loaded) is
/// updated in waves when updates are enabled.
pub fn eval_mode(
    config: &RunConfig,
    backbone: &Backbone<f32>,
    composer: Option<&Composer<f32>>,
    mode: Mode,
) -> Result<EvalReport> {
    let sys = system(config, mode)?;
    let tasks = eval_tasks(config)?;
    let mut bank = initial_bank(config, backbone)?;
    let use_bank = mode != Mode::NoMemory;
    let composer = if mode == Mode::Latentmem { composer } else { None };
    let opts = config.episode_options();
    evaluate(
        &sys,
        backbone,
        composer,
        use_bank.then_some(&mut bank),
        &tasks,
        &opts,
        config.eval_wave,
        derive_seed(config.seed, 3),
    )
}
