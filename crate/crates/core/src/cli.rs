//! `latentmem` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::composer::Composer;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lmpo::gradcheck::full_graph_check;
use crate::mas::{run_episode, Mode, Split};
use crate::pipeline;
use crate::tensor::gradcheck::op_suite;

/// Tolerances used by `gradcheck`.
pub const OP_TOLERANCE: f64 = 1e-4;
pub const FULL_GRAPH_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "latentmem", version, about = "Latent memory for multi-agent LM systems")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory; defaults to `<runs_dir>/<timestamp>-<tag>/`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a backbone on the synthetic corpus.
    Pretrain,
    /// Bootstrap an experience bank from reference trajectories.
    InitBank,
    /// Train the memory composer.
    Train,
    /// Evaluate one or more modes on the eval split.
    Eval {
        /// Comma-separated modes; defaults to the configured mode.
        #[arg(long)]
        modes: Option<String>,
    },
    /// Print one episode step by step.
    Rollout {
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Show the top entries of the bank for a query.
    BankQuery {
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Write composed latents for every eval query and agent as CSV.
    ExportLatents,
    /// Finite-difference check of the tape and of the training graph.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` and runs the command. Usage errors exit with 2, config
/// errors with 2, and failures with 1.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let mut stdout = std::io::stdout().lock();
    match run(&cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UnknownKey { .. } | Error::BadValue { .. } | Error::Parse { .. } | Error::Validation(_) => 2,
        _ => 1,
    }
}

fn out_dir(cli: &Cli, config: &RunConfig) -> Result<PathBuf> {
    match &cli.run_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Ok(d.clone())
        }
        None => pipeline::create_run_dir(config),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn loaded_composer(config: &RunConfig, backbone: &crate::lm::Backbone<f32>) -> Result<Composer<f32>> {
    if config.composer_path.is_empty() {
        return Err(Error::validation("composer_path is not set; run `train` first"));
    }
    pipeline::composer(config, backbone)
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if config.workers > 0 {
        // the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build_global();
    }
    match &cli.command {
        Command::Pretrain => {
            let dir = out_dir(cli, &config)?;
            pipeline::write_resolved_config(&config, &dir)?;
            let (model, report) = pipeline::pretrain(&config)?;
            let path = dir.join("backbone.lmc");
            checkpoint::save_backbone(&path, &model)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                let _ = writeln!(csv, "{i},{}", crate::metrics::format_sig9(*l));
            }
            write_file(&dir.join("pretrain_losses.csv"), &csv)?;
            let last = report.window_means(100).last().copied().unwrap_or(f64::NAN);
            emit(out, &format!("backbone: {}\nfinal loss: {last:.4}\n", path.display()))
        }
        Command::InitBank => {
            let backbone = pipeline::load_backbone(&config)?;
            let dir = out_dir(cli, &config)?;
            pipeline::write_resolved_config(&config, &dir)?;
            let bank = pipeline::initial_bank(&config, &backbone)?;
            let path = dir.join("bank.jsonl");
            bank.save_jsonl(&path)?;
            emit(out, &format!("bank: {} ({} entries)\n", path.display(), bank.len()))
        }
        Command::Train => {
            let backbone = pipeline::load_backbone(&config)?;
            let dir = out_dir(cli, &config)?;
            pipeline::write_resolved_config(&config, &dir)?;
            let outcome = pipeline::train(&config, &backbone, Some(&dir))?;
            let s = &outcome.summary;
            let mut text = format!("run dir: {}\nsteps: {}\n", dir.display(), s.steps);
            for (step, r) in &s.evals {
                let _ = writeln!(text, "eval step {step}: {r:.4}");
            }
            if s.skipped_groups > 0 {
                let _ = writeln!(text, "skipped groups: {}", s.skipped_groups);
            }
            emit(out, &text)
        }
        Command::Eval { modes } => {
            let backbone = pipeline::load_backbone(&config)?;
            let modes: Vec<Mode> = match modes {
                Some(m) => m.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?,
                None => vec![config.mode()?],
            };
            let composer = if modes.contains(&Mode::Latentmem) {
                Some(loaded_composer(&config, &backbone)?)
            } else {
                None
            };
            let dir = out_dir(cli, &config)?;
            pipeline::write_resolved_config(&config, &dir)?;
            let mut csv = String::from("mode,family,mean_reward,episodes\n");
            for mode in modes {
                let report = pipeline::eval_mode(&config, &backbone, composer.as_ref(), mode)?;
                for (family, r, n) in &report.per_family {
                    let _ = writeln!(csv, "{},{},{},{n}", mode.name(), family.name(), crate::metrics::format_sig9(*r));
                }
                let _ = writeln!(
                    csv,
                    "{},all,{},{}",
                    mode.name(),
                    crate::metrics::format_sig9(report.mean_reward),
                    report.episodes.len()
                );
            }
            write_file(&dir.join("eval.csv"), &csv)?;
            emit(out, &csv)
        }
        Command::Rollout { index, split } => {
            let backbone = pipeline::load_backbone(&config)?;
            let split: Split = split.parse()?;
            let tasks = pipeline::tasks(&config, split, config.train_per_world.max(config.eval_per_world))?;
            let task = tasks
                .get(*index)
                .ok_or_else(|| Error::validation(format!("task index {index} out of range ({} tasks)", tasks.len())))?;
            let mode = config.mode()?;
            let composer = match mode {
                Mode::Latentmem => Some(loaded_composer(&config, &backbone)?),
                _ => None,
            };
            let bank = pipeline::initial_bank(&config, &backbone)?;
            let sys = pipeline::system(&config, mode)?;
            let bank = (mode != Mode::NoMemory).then_some(&bank);
            let e = run_episode(&sys, &backbone, composer.as_ref(), bank, task, &config.episode_options(), config.seed)?;
            let mut text = format!("query: {}\ngold: {}\n", task.query, task.gold);
            for (step, agent) in e.trajectory.steps.iter().zip(&e.steps) {
                let role = sys.agents[agent.agent].role.name();
                let _ = writeln!(text, "--- {role} (memory rows: {})", agent.memory_rows);
                let _ = writeln!(text, "prompt: {}", step.prompt.replace('\n', "\n        "));
                let _ = writeln!(text, "output: {}", step.output);
            }
            let _ = writeln!(text, "reward: {}", e.reward);
            emit(out, &text)
        }
        Command::BankQuery { query, k } => {
            let backbone = pipeline::load_backbone(&config)?;
            let bank = pipeline::initial_bank(&config, &backbone)?;
            let hits = bank.retrieve(query, *k)?;
            if hits.is_empty() {
                return emit(out, "0 results\n");
            }
            let mut text = format!("{} results\n", hits.len());
            for h in hits {
                let t = &bank.entries()[h.index];
                let _ = writeln!(text, "{:.4}\t#{}\t{}\t{}", h.similarity, t.id, t.query, t.final_output());
            }
            emit(out, &text)
        }
        Command::ExportLatents => {
            let backbone = pipeline::load_backbone(&config)?;
            let composer = loaded_composer(&config, &backbone)?;
            let bank = pipeline::initial_bank(&config, &backbone)?;
            let sys = pipeline::system(&config, Mode::Latentmem)?;
            let dir = out_dir(cli, &config)?;
            let mut csv = String::from("query,agent,role,row");
            for d in 0..backbone.config.d_model {
                let _ = write!(csv, ",d{d}");
            }
            csv.push('\n');
            for task in pipeline::eval_tasks(&config)? {
                let retrieved = bank.retrieve_topk(&task.query, config.top_k)?;
                for (a, agent) in sys.agents.iter().enumerate() {
                    let m = composer.compose_value(&agent.profile, &retrieved)?;
                    for r in 0..m.rows() {
                        let _ = write!(csv, "\"{}\",{a},{},{r}", task.query, agent.role.name());
                        for v in m.row(r) {
                            let _ = write!(csv, ",{v}");
                        }
                        csv.push('\n');
                    }
                }
            }
            let path = dir.join("latents.csv");
            write_file(&path, &csv)?;
            emit(out, &format!("latents: {}\n", path.display()))
        }
        Command::Gradcheck { seed } => {
            let mut text = String::new();
            let mut ok = true;
            for c in op_suite(*seed)? {
                let pass = c.max_rel_error < OP_TOLERANCE;
                ok &= pass;
                let _ = writeln!(text, "{:<16} {:.3e} {}", c.name, c.max_rel_error, if pass { "ok" } else { "FAIL" });
            }
            let full = full_graph_check(*seed)?;
            let pass = full.max_rel_error < FULL_GRAPH_TOLERANCE && full.backbone_grads == 0;
            ok &= pass;
            let _ = writeln!(
                text,
                "{:<16} {:.3e} {} (backbone tensors with gradient: {})",
                "full_graph",
                full.max_rel_error,
                if pass { "ok" } else { "FAIL" },
                full.backbone_grads
            );
            emit(out, &text)?;
            let _ = out.flush();
            if ok {
                Ok(())
            } else {
                Err(Error::contract("gradient check failed"))
            }
        }
    }
}
