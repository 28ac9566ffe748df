use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed = 4
workers = 1
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
max_seq_len = 256
pretrain_steps = 3
pretrain_batch = 2
corpus_lines = 40
composer_layers = 1
composer_heads = 2
composer_d_ff = 16
composer_context = 64
latent_len = 4
n_worlds = 2
train_per_world = 2
eval_per_world = 1
group_size = 2
macro_batch = 1
total_steps = 2
eval_every = 0
max_new_tokens = 6
";

fn latentmem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentmem"))
        .current_dir(dir)
        .env_remove("LATENTMEM_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn text(out: &Output) -> (String, String) {
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn unknown_keys_exit_2_with_a_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.conf"), "# comment\nlearning_rat = 0.1\n").unwrap();
    let out = latentmem(dir.path(), &["--config", "c.conf", "gradcheck"]);
    let (_, err) = text(&out);
    assert_eq!(out.status.code(), Some(2), "{err}");
    assert!(err.contains("learning_rat") && err.contains("learning_rate"), "{err}");
    assert!(err.contains("line 2"), "line number missing: {err}");

    let out = latentmem(dir.path(), &["--set", "group_size=two", "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
    let out = latentmem(dir.path(), &["--set", "kl_weight=0.1", "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
    let out = latentmem(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = latentmem(dir.path(), &["--set", "backbone_path=nope.lmc", "init-bank"]);
    assert_eq!(out.status.code(), Some(1));
    let (_, err) = text(&out);
    assert!(err.contains("nope."), "{err}");
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = latentmem(dir.path(), &["gradcheck", "--seed", "2"]);
    let (stdout, err) = text(&out);
    assert!(out.status.success(), "{stdout}{err}");
    assert!(stdout.contains("full_graph"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.conf"), TINY).unwrap();
    let cfg = ["--config", "tiny.conf"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = cfg.iter().chain(extra).copied().collect();
        let out = latentmem(d, &args);
        let (o, e) = text(&out);
        assert!(out.status.success(), "{extra:?}: {o}{e}");
        o
    };

    run(&["--run-dir", "pre", "pretrain"]);
    assert!(d.join("pre/backbone.lmc").exists());
    assert_eq!(std::fs::read_to_string(d.join("pre/pretrain_losses.csv")).unwrap().lines().count(), 4);
    assert!(std::fs::read_to_string(d.join("pre/config.txt")).unwrap().contains("d_model = 16"));

    let bb = "backbone_path=pre/backbone.lmc";
    let o = run(&["--set", bb, "--run-dir", "bank", "init-bank"]);
    assert!(o.contains("12 entries"), "{o}");
    assert_eq!(run(&["--set", bb, "bank-query", "--query", ""]), "0 results\n");
    let o = run(&["--set", bb, "bank-query", "--query", "VALUE OF", "--k", "2"]);
    assert!(o.starts_with("2 results"), "{o}");

    let o = run(&["--set", bb, "--run-dir", "train", "train"]);
    assert!(o.contains("steps: 2"), "{o}");
    let metrics = std::fs::read_to_string(d.join("train/metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 3, "{metrics}");
    let composer = d.join("train/checkpoints/composer.lmc");
    assert!(composer.exists());

    let cp = format!("composer_path={}", composer.display());
    let o = run(&["--set", bb, "--set", &cp, "--run-dir", "eval", "eval", "--modes", "no_memory,latentmem"]);
    let rows: Vec<&str> = o.lines().filter(|l| l.contains(",all,")).collect();
    assert_eq!(rows.len(), 2, "{o}");
    assert!(rows[0].starts_with("no_memory,") && rows[1].starts_with("latentmem,"));
    assert_eq!(std::fs::read_to_string(d.join("eval/eval.csv")).unwrap(), o);

    let o = run(&["--set", bb, "--set", &cp, "rollout", "--index", "1"]);
    assert!(o.contains("--- solver") && o.contains("--- checker") && o.contains("reward:"), "{o}");

    run(&["--set", bb, "--set", &cp, "--run-dir", "lat", "export-latents"]);
    let csv = std::fs::read_to_string(d.join("lat/latents.csv")).unwrap();
    // 2 eval queries x 2 agents x 4 rows plus the header
    assert_eq!(csv.lines().count(), 17);
    assert!(csv.lines().next().unwrap().ends_with(",d15"));
}
