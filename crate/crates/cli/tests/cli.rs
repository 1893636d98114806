use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use battsynth_core::data::{load_csv, CsvOptions};
use tempfile::TempDir;

const TINY: &str = r#"
[windows]
conditioning = 16
horizon = 4

[optimizer]
max_epochs = 2
batch_size = 16
max_batches_per_epoch = 2

[forecast]
n_samples = 4
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_battsynth"))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

fn run(cfg: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(cfg).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn nbeats_config(extra: &str) -> String {
    format!("{TINY}\n[model]\nkind = \"nbeats\"\nstacks = 1\nblocks_per_stack = 2\nwidth = 8\n{extra}")
}

#[test]
fn train_writes_checkpoint_reports_and_snapshot() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &nbeats_config(""));
    let o = run(&cfg, &["--out", dir.path().join("o").to_str().unwrap(), "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("o");
    for f in ["checkpoint.ckpt", "train_report.csv", "eval_report.csv", "resolved_config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(out.join("train_report.csv")).unwrap();
    assert!(report.starts_with("epoch,train_loss,val_loss\n"));
}

#[test]
fn missing_model_kind_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}\n[model]\nwidth = 8\n"));
    let o = run(&cfg, &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.kind"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), TINY);
    let o = run(&cfg, &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.kind"), "{}", stderr(&o));
}

#[test]
fn unknown_field_and_missing_data_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &nbeats_config("bogus = 1\n"));
    let o = run(&cfg, &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), &format!("[data]\npath = \"nope.csv\"\n{}", nbeats_config("")));
    let o = run(&cfg, &["ingest"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn same_seed_gives_identical_checkpoints_and_snapshot_replays() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &nbeats_config(""));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&cfg, &["--seed", "5", "--out", out.to_str().unwrap(), "train"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ckpt = |d: &Path| fs::read(d.join("checkpoint.ckpt")).unwrap();
    assert_eq!(ckpt(&a), ckpt(&b));

    let c = dir.path().join("c");
    let o = bin()
        .arg("--config")
        .arg(a.join("resolved_config.toml"))
        .args(["--out", c.to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(ckpt(&a), ckpt(&c));
    assert!(fs::read_to_string(a.join("resolved_config.toml")).unwrap().contains("seed = 5"));

    let o = run(&cfg, &["--seed", "6", "--out", c.to_str().unwrap(), "train"]);
    assert!(o.status.success());
    assert_ne!(ckpt(&a), ckpt(&c));
}

#[test]
fn evaluate_matches_training_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &nbeats_config(""));
    let out = dir.path().join("o");
    let o = run(&cfg, &["--out", out.to_str().unwrap(), "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trained = fs::read_to_string(out.join("eval_report.csv")).unwrap();
    let o = run(&cfg, &["--out", out.to_str().unwrap(), "evaluate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("eval_report.csv")).unwrap(), trained);
}

#[test]
fn missing_checkpoint_exits_four() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &nbeats_config(""));
    for cmd in ["evaluate", "synthesize"] {
        let o = run(&cfg, &["--out", dir.path().join("empty").to_str().unwrap(), cmd]);
        assert_eq!(o.status.code(), Some(4), "{cmd}: {}", stderr(&o));
        assert!(dir.path().join("empty/resolved_config.toml").exists());
    }
}

#[test]
fn divergence_exits_three() {
    let dir = TempDir::new().unwrap();
    let body = r#"
[windows]
conditioning = 16
horizon = 4
[model]
kind = "deepar"
hidden = 4
[optimizer]
kind = "sgd"
learning_rate = 1e200
grad_clip = 0
max_epochs = 3
max_batches_per_epoch = 2
"#;
    let cfg = write_config(dir.path(), body);
    let o = run(&cfg, &["--out", dir.path().join("o").to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn compare_needs_two_models() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}\n[[compare.models]]\nkind = \"nbeats\"\n"));
    let o = run(&cfg, &["compare"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(">= 2"), "{}", stderr(&o));
}

#[test]
fn compare_emits_full_grid_and_reproducible_ranking() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        r#"{TINY}
[compare]
horizons = [1, 3]
[[compare.models]]
kind = "nbeats"
stacks = 1
blocks_per_stack = 1
width = 4
lookback_multiple = 1
[[compare.models]]
kind = "deeptcn"
channels = 4
decoder_width = 4
"#
    );
    let cfg = write_config(dir.path(), &body);
    let mut rankings = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&cfg, &["--out", out.to_str().unwrap(), "compare"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
        let lines: Vec<&str> = sweep.lines().collect();
        assert_eq!(lines[0], "model,variable,horizon,mae,runtime_s");
        assert_eq!(lines.len(), 1 + 2 * 2 * 2);
        rankings.push(fs::read(out.join("ranking.csv")).unwrap());
        assert!(out.join("ranking_cells.csv").exists());
    }
    assert_eq!(rankings[0], rankings[1]);
}

#[test]
fn synthesize_writes_variants_that_reingest_and_retrain() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), &nbeats_config("[synthesize]\nn_variants = 3\n"));
    let o = run(&cfg, &["--out", out.to_str().unwrap(), "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&cfg, &["--out", out.to_str().unwrap(), "synthesize"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files: Vec<PathBuf> = (0..3).map(|v| out.join(format!("synthetic_{v:03}.csv"))).collect();
    assert!(!out.join("synthetic_003.csv").exists());
    for f in &files {
        let text = fs::read_to_string(f).unwrap();
        assert!(text.starts_with("# synthetic=true,generator=nbeats,seed="), "{}", &text[..60]);
        load_csv(f, &CsvOptions::default()).unwrap();
    }
    let fidelity = fs::read_to_string(out.join("fidelity.csv")).unwrap();
    assert!(fidelity.lines().any(|l| l.starts_with("persistence,voltage_V,")), "{fidelity}");

    let body = format!("[data]\npath = {:?}\n{}", files[0].to_str().unwrap(), nbeats_config(""));
    let cfg = write_config(dir.path(), &body);
    let o = run(&cfg, &["--out", dir.path().join("re").to_str().unwrap(), "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn ingest_summarizes_the_bundled_fixture_without_a_config() {
    let dir = TempDir::new().unwrap();
    let o = bin().current_dir(dir.path()).args(["--out", "x", "ingest"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("x/ingest_summary.csv")).unwrap();
    assert!(summary.starts_with("column,rows,min,max,mean\n"));
    assert!(summary.contains("voltage_V,2000,"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("10 cycle(s)"));
}
