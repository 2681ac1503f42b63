use std::fs;
use std::path::Path;
use std::process::Command as Process;

use nmode::cli::{self, run_command, Command};
use nmode::config::{parse_config, RunConfig};
use nmode::eval::read_metrics_json;
use nmode::params::load_checkpoint;
use nmode::Error;

fn tiny(out: &Path, extra: &[&str]) -> RunConfig {
    let mut sets: Vec<String> = [
        "dataset.realizations=6",
        "dataset.steps=40",
        "model.mlp_width=8",
        "model.rnn_width=4",
        "model.residual_width=8",
        "train.epochs=2",
        "train.batch_size=2",
        "train.segment_steps=20",
        "eval.snapshots=[0.0,1.0]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.extend(extra.iter().map(|s| s.to_string()));
    sets.push(format!("paths.output={}", out.display()));
    parse_config(None, &sets).unwrap()
}

fn run_all(cfg: &RunConfig) {
    for cmd in [Command::Generate, Command::Modal, Command::Train, Command::Eval, Command::Reconstruct, Command::Baseline] {
        run_command(cmd, cfg).unwrap_or_else(|e| panic!("{cmd:?}: {e}"));
    }
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    run_all(&cfg);
    let out = dir.path();
    for f in [
        "effective_config.json",
        "dataset/manifest.json",
        "dataset/real_0000.csv",
        "dataset/truth_0005.csv",
        "basis/omega.txt",
        "basis/xi.txt",
        "basis/phi.txt",
        "checkpoint.txt",
        "loss_log.csv",
        "metrics.json",
        "reconstruct/disp.csv",
        "reconstruct/vel.csv",
        "reconstruct/acc.csv",
        "reconstruct/snapshots.csv",
        "baseline/metrics.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join(".nmode.lock").exists());
    let disp = fs::read_to_string(out.join("reconstruct/disp.csv")).unwrap();
    assert_eq!(disp.lines().count(), 1 + 41);
    let log = fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,recon_term,kl_term,total");
    assert_eq!(log.lines().count(), 3);

    // The hash in the checkpoint follows through to the metrics.
    let ckpt = load_checkpoint(&out.join("checkpoint.txt")).unwrap();
    let metrics = read_metrics_json(&out.join("metrics.json")).unwrap();
    assert_eq!(ckpt.meta.config_hash, cfg.hash());
    assert_eq!(metrics.config_hash, ckpt.meta.config_hash);
    assert_eq!(metrics.realizations, 1);
    assert!(metrics.virtual_sensing.unwrap().channel("disp_2").is_some());

    // The echoed configuration reproduces the run.
    let echoed = parse_config(Some(&out.join("effective_config.json")), &[]).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn missing_prerequisites_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    match cli::train(&cfg, &mut |_| {}) {
        Err(Error::MissingArtifact { path, .. }) => assert!(path.ends_with("dataset/manifest.json")),
        other => panic!("{:?}", other.map(|_| ())),
    }
    run_command(Command::Generate, &cfg).unwrap();
    match cli::evaluate(&cfg) {
        Err(Error::MissingArtifact { path, .. }) => assert_eq!(path, cfg.checkpoint_path()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn stale_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    run_command(Command::Generate, &cfg).unwrap();
    let other = tiny(dir.path(), &["system.cubic=0.5"]);
    match run_command(Command::Train, &other) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("system.cubic"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn baseline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    run_command(Command::Generate, &cfg).unwrap();
    run_command(Command::Baseline, &cfg).unwrap();
    let first = fs::read(dir.path().join("baseline/metrics.json")).unwrap();
    run_command(Command::Baseline, &cfg).unwrap();
    assert_eq!(fs::read(dir.path().join("baseline/metrics.json")).unwrap(), first);
}

#[test]
fn rerunning_train_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    run_command(Command::Generate, &cfg).unwrap();
    run_command(Command::Train, &cfg).unwrap();
    let ckpt = fs::read(cfg.checkpoint_path()).unwrap();
    let log = fs::read(dir.path().join("loss_log.csv")).unwrap();
    run_command(Command::Train, &cfg).unwrap();
    assert_eq!(fs::read(cfg.checkpoint_path()).unwrap(), ckpt);
    assert_eq!(fs::read(dir.path().join("loss_log.csv")).unwrap(), log);
}

#[test]
fn interrupted_training_resumes_bitwise() {
    let a = tempfile::tempdir().unwrap();
    let cfg = tiny(a.path(), &[]);
    run_command(Command::Generate, &cfg).unwrap();
    run_command(Command::Train, &cfg).unwrap();

    // Train one epoch, stamp the checkpoint with the full run's hash as if
    // the full run had been interrupted, then let `train` pick it up.
    let b = tempfile::tempdir().unwrap();
    let cfg_b = tiny(b.path(), &[]);
    run_command(Command::Generate, &cfg_b).unwrap();
    let mut seen = 0;
    let mut stop = |_: &nmode::training::EpochRecord| {
        seen += 1;
    };
    let mut short = cfg_b.clone();
    short.train.epochs = 1;
    let outcome = cli::train(&short, &mut stop).unwrap();
    assert_eq!(outcome.params.meta.epoch, 1);
    let mut p = load_checkpoint(&cfg_b.checkpoint_path()).unwrap();
    p.meta.config_hash = cfg_b.hash();
    nmode::params::save_checkpoint(&p, &cfg_b.checkpoint_path()).unwrap();
    run_command(Command::Train, &cfg_b).unwrap();
    assert_eq!(seen, 1);
    assert_eq!(
        fs::read(cfg.checkpoint_path()).unwrap(),
        fs::read(cfg_b.checkpoint_path()).unwrap()
    );
    assert_eq!(
        fs::read(a.path().join("loss_log.csv")).unwrap(),
        fs::read(b.path().join("loss_log.csv")).unwrap()
    );
}

#[test]
fn locked_output_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    fs::write(dir.path().join(".nmode.lock"), "").unwrap();
    assert!(matches!(run_command(Command::Modal, &cfg), Err(Error::Locked { .. })));
}

fn binary(args: &[&str]) -> std::process::Output {
    Process::new(env!("CARGO_BIN_EXE_nmode")).args(args).output().unwrap()
}

#[test]
fn binary_reports_failures_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = binary(&["eval", "--out", out]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("checkpoint.txt"), "{err}");

    let o = binary(&["modal", "--out", out, "--set", "model.pp=3"]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("model.pp"), "{err}");

    let o = binary(&["modal", "--out", out, "--seed", "5"]);
    assert!(o.status.success());
    let echoed = fs::read_to_string(dir.path().join("effective_config.json")).unwrap();
    assert!(echoed.contains("\"seed\": 5"));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, r#"{"model": {"modes": 3}, "train": {"lr": 0.01}}"#).unwrap();
    let out = dir.path().join("out");
    let o = binary(&[
        "modal",
        "--config",
        path.to_str().unwrap(),
        "--set",
        "train.lr=1e-4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = parse_config(Some(&out.join("effective_config.json")), &[]).unwrap();
    assert_eq!(echoed.model.modes, 3);
    assert_eq!(echoed.train.lr, 1e-4);
    let omega = fs::read_to_string(out.join("basis/omega.txt")).unwrap();
    assert_eq!(omega.lines().count(), 3);
}
