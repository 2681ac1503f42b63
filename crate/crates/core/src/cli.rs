//! Command-line pipeline: generate, modal, train, eval, reconstruct, baseline.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{parse_config, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_fem, evaluate_hybrid, export_full_field, write_metrics_json, ComparisonRow, MetricsFile, MetricsReport,
};
use crate::math::RealArray;
use crate::modal::{build_modal_basis, format_matrix, ModalBasis};
use crate::model::NeuralModalOde;
use crate::params::{load_checkpoint, save_checkpoint, ParameterStore};
use crate::simulator::{
    generate_dataset, perturb_system, read_dataset, write_channels_csv, write_dataset, Dataset, DatasetManifest,
};
use crate::training::{read_loss_log, train_model, write_loss_log, TrainOutcome};

#[derive(Parser, Debug)]
#[command(name = "nmode", version, about = "Neural modal ODE pipeline for monitored structures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=1e-4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (same as `paths.output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (same as `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    /// Simulate the ground-truth system and write the dataset.
    Generate,
    /// Write natural frequencies, damping ratios and mode shapes.
    Modal,
    /// Fit the model and write the checkpoint and loss log.
    Train,
    /// Score the trained model and the physics baseline on the test split.
    Eval,
    /// Export the full-field reconstruction of one test realization.
    Reconstruct,
    /// Predict the test split with the perturbed physics model.
    Baseline,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Failures print one line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve_config(&cli).and_then(|cfg| run_command(cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = parse_config(cli.config.as_deref(), &cli.set)?;
    if let Some(out) = &cli.out {
        cfg.paths.output = Some(out.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Removes the lock file when the command finishes, however it finishes.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".nmode.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked { path }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Runs one pipeline stage against the resolved configuration. The effective
/// configuration is echoed to `effective_config.json` in the output directory.
pub fn run_command(cmd: Command, cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_dir();
    let _lock = OutputLock::acquire(&out)?;
    write_file(&out.join("effective_config.json"), &cfg.to_json())?;
    match cmd {
        Command::Generate => {
            let ds = generate(cfg)?;
            println!(
                "wrote {} realizations ({} train, {} test) to {}",
                ds.manifest.realizations,
                ds.manifest.train.len(),
                ds.manifest.test.len(),
                cfg.dataset_dir().display()
            );
        }
        Command::Modal => {
            let basis = modal(cfg)?;
            for (i, (w, x)) in basis.omegas.iter().zip(&basis.xis).enumerate() {
                println!("mode {}: omega {w:.6} rad/s, xi {x:.6}", i + 1);
            }
        }
        Command::Train => {
            let outcome = train(cfg, &mut |_| {})?;
            let last = outcome.params.meta.epoch;
            let note = if outcome.stopped_early { " (early stop)" } else { "" };
            println!("trained to epoch {last}{note}; checkpoint {}", cfg.checkpoint_path().display());
        }
        Command::Eval => {
            let m = evaluate(cfg)?;
            if let Some(h) = &m.hybrid {
                println!("hybrid model\n{}", h.table());
            }
            if let Some(f) = &m.fem {
                println!("physics baseline\n{}", f.table());
            }
            if let Some(v) = &m.virtual_sensing {
                println!("virtual sensing\n{}", v.table());
            }
        }
        Command::Reconstruct => {
            let dir = reconstruct(cfg)?;
            println!("wrote full-field reconstruction to {}", dir.display());
        }
        Command::Baseline => {
            let m = baseline(cfg)?;
            if let Some(f) = &m.fem {
                println!("{}", f.table());
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    let sys = cfg.system()?;
    let ds = generate_dataset(&sys, &cfg.measurement_spec()?, &cfg.generate_options())?;
    write_dataset(&cfg.dataset_dir(), &ds)?;
    Ok(ds)
}

/// The decoder basis comes from the linear part of the configured system.
pub fn modal_basis(cfg: &RunConfig) -> Result<ModalBasis> {
    build_modal_basis(&cfg.system()?.linearized(), cfg.model.modes)
}

pub fn modal(cfg: &RunConfig) -> Result<ModalBasis> {
    let basis = modal_basis(cfg)?;
    let dir = cfg.output_dir().join("basis");
    let column = |v: &[f64]| RealArray::new(vec![v.len(), 1], v.to_vec()).expect("column shape");
    write_file(&dir.join("omega.txt"), &format_matrix(&column(&basis.omegas)))?;
    write_file(&dir.join("xi.txt"), &format_matrix(&column(&basis.xis)))?;
    write_file(&dir.join("phi.txt"), &format_matrix(&basis.phi))?;
    Ok(basis)
}

/// Model architecture and decoder basis for `cfg`; parameters are separate.
pub fn build_model(cfg: &RunConfig) -> Result<NeuralModalOde> {
    NeuralModalOde::new(cfg.model.clone(), modal_basis(cfg)?, &cfg.measurement_spec()?)
}

/// Reads the dataset and checks that it was generated with the configured
/// system, sampling and measurement settings.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    if !dir.join("manifest.json").exists() {
        return Err(Error::MissingArtifact {
            what: "dataset (run `generate` first)",
            path: dir.join("manifest.json"),
        });
    }
    let ds = read_dataset(&dir)?;
    check_manifest(cfg, &ds.manifest, &dir)?;
    Ok(ds)
}

fn check_manifest(cfg: &RunConfig, m: &DatasetManifest, dir: &Path) -> Result<()> {
    let spec = cfg.measurement_spec()?;
    let o = cfg.generate_options();
    let checks = [
        ("dataset.realizations", m.realizations == o.realizations),
        ("dataset.dt", m.dt == o.dt),
        ("dataset.steps", m.steps == o.steps),
        ("dataset.substeps", m.substeps == o.substeps),
        ("dataset.noise_rms_fraction", m.noise_rms_fraction == spec.noise_rms_fraction),
        ("dataset.channels", m.channels == spec.channels),
        ("system.cubic", m.cubic == cfg.system.cubic),
        ("system.cubic_equation", m.cubic_row + 1 == cfg.system.cubic_equation),
        ("seed", m.seed == o.seed),
    ];
    if let Some((key, _)) = checks.iter().find(|(_, ok)| !ok) {
        return Err(Error::Protocol(format!(
            "dataset at {} was generated with a different `{key}`; rerun `generate`",
            dir.display()
        )));
    }
    Ok(())
}

fn loss_log_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir().join("loss_log.csv")
}

/// Trains from scratch, or resumes when the checkpoint on disk belongs to the
/// same configuration. The checkpoint and loss log are rewritten after every
/// epoch.
pub fn train(cfg: &RunConfig, progress: &mut dyn FnMut(&crate::training::EpochRecord)) -> Result<TrainOutcome> {
    let ds = load_dataset(cfg)?;
    let model = build_model(cfg)?;
    let hash = cfg.hash();
    let ckpt = cfg.checkpoint_path();
    let log_path = loss_log_path(cfg);
    let existing = if ckpt.exists() { Some(load_checkpoint(&ckpt)?) } else { None };
    let (params, mut log) = match existing {
        Some(p) if p.meta.config_hash == hash && log_path.exists() => {
            let mut log = read_loss_log(&log_path)?;
            log.truncate(p.meta.epoch);
            (p, log)
        }
        _ => {
            let mut p = model.init_parameters(cfg.seed);
            let train: Vec<&RealArray> = ds.manifest.train.iter().map(|&i| &ds.measured[i]).collect();
            model.fit_input_normalization(&mut p, &train)?;
            p.meta.config_hash = hash.clone();
            p.meta.cubic = cfg.system.cubic;
            p.meta.basis_fingerprint = model.basis.fingerprint();
            (p, Vec::new())
        }
    };
    let sequences: Vec<&RealArray> = ds.manifest.train.iter().map(|&i| &ds.measured[i]).collect();
    if sequences.is_empty() {
        return Err(Error::Input("the training split is empty (dataset.train_fraction)".into()));
    }
    let tmp = ckpt.with_extension("tmp");
    let mut on_epoch = |rec: &crate::training::EpochRecord, p: &ParameterStore| -> Result<()> {
        log.push(*rec);
        save_checkpoint(p, &tmp)?;
        fs::rename(&tmp, &ckpt).map_err(|e| Error::io(&ckpt, e))?;
        write_loss_log(&log_path, &log)?;
        progress(rec);
        Ok(())
    };
    let outcome = train_model(&model, &sequences, ds.manifest.dt, &cfg.train, cfg.seed, params, &mut on_epoch)?;
    // Zero-epoch runs still leave a checkpoint behind.
    if !ckpt.exists() {
        save_checkpoint(&outcome.params, &ckpt)?;
        write_loss_log(&log_path, &[])?;
    }
    Ok(outcome)
}

fn load_trained(cfg: &RunConfig, model: &NeuralModalOde) -> Result<ParameterStore> {
    let ckpt = cfg.checkpoint_path();
    if !ckpt.exists() {
        return Err(Error::MissingArtifact {
            what: "checkpoint (run `train` first)",
            path: ckpt,
        });
    }
    let params = load_checkpoint(&ckpt)?;
    params.check_compatible(&model.init_parameters(0))?;
    if params.meta.basis_fingerprint != model.basis.fingerprint() {
        return Err(Error::Compatibility(format!(
            "checkpoint {} was trained on a different modal basis",
            ckpt.display()
        )));
    }
    Ok(params)
}

fn test_indices(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<usize>> {
    let n = cfg.eval.max_realizations.unwrap_or(usize::MAX);
    let idx: Vec<usize> = ds.manifest.test.iter().copied().take(n).collect();
    if idx.is_empty() {
        return Err(Error::Input("the test split is empty (dataset.train_fraction)".into()));
    }
    Ok(idx)
}

fn fem_report(cfg: &RunConfig, ds: &Dataset, idx: &[usize]) -> Result<MetricsReport> {
    let sys = cfg.system()?;
    let perturbed = perturb_system(&sys, cfg.eval.fem_perturbation, cfg.seed)?;
    evaluate_fem(&perturbed, ds, idx)
}

/// Scores the checkpoint and the physics baseline on the test split and
/// writes `metrics.json`, stamped with the checkpoint's configuration hash.
pub fn evaluate(cfg: &RunConfig) -> Result<MetricsFile> {
    let model = build_model(cfg)?;
    let params = load_trained(cfg, &model)?;
    let ds = load_dataset(cfg)?;
    let idx = test_indices(cfg, &ds)?;
    let held = cfg.held_out_channels()?;
    let (hybrid, virt) = evaluate_hybrid(&model, &params, &ds, &idx, &held)?;
    let fem = fem_report(cfg, &ds, &idx)?;
    let m = MetricsFile {
        config_hash: params.meta.config_hash.clone(),
        seed: cfg.seed,
        realizations: idx.len(),
        rows: vec![ComparisonRow {
            cubic: cfg.system.cubic,
            hybrid_nrmse: Some(hybrid.mean_nrmse),
            hybrid_r2: Some(hybrid.mean_r2),
            fem_nrmse: Some(fem.mean_nrmse),
            fem_r2: Some(fem.mean_r2),
        }],
        hybrid: Some(hybrid),
        fem: Some(fem),
        virtual_sensing: (!held.is_empty()).then_some(virt),
    };
    write_metrics_json(&cfg.output_dir().join("metrics.json"), &m)?;
    Ok(m)
}

/// Full-field export of test realization `eval.reconstruct_index`.
pub fn reconstruct(cfg: &RunConfig) -> Result<PathBuf> {
    let model = build_model(cfg)?;
    let params = load_trained(cfg, &model)?;
    let ds = load_dataset(cfg)?;
    let k = cfg.eval.reconstruct_index;
    let &i = ds.manifest.test.get(k).ok_or_else(|| Error::ConfigInvalid {
        key: "eval.reconstruct_index".into(),
        reason: format!("test split has {} realizations", ds.manifest.test.len()),
    })?;
    let times = ds.manifest.times();
    let pred = model.predict_sequence(&params, &ds.measured[i], &times, None)?;
    let dir = cfg.output_dir().join("reconstruct");
    export_full_field(&dir, &times, &pred.response, &cfg.eval.snapshots)?;
    write_channels_csv(&dir.join("measured.csv"), &ds.manifest.channels, &times, &ds.measured[i])?;
    Ok(dir)
}

/// Baseline channel predictions per test realization plus their metrics.
pub fn baseline(cfg: &RunConfig) -> Result<MetricsFile> {
    let ds = load_dataset(cfg)?;
    let idx = test_indices(cfg, &ds)?;
    let sys = cfg.system()?;
    let perturbed = perturb_system(&sys, cfg.eval.fem_perturbation, cfg.seed)?;
    let spec = ds.manifest.measurement_spec();
    let dir = cfg.output_dir().join("baseline");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for &i in &idx {
        let b = crate::simulator::fem_baseline_predict(&perturbed, &ds.truth[i], &spec, ds.manifest.substeps)?;
        write_channels_csv(&dir.join(format!("pred_{i:04}.csv")), &spec.channels, &ds.truth[i].times, &b.measured)?;
    }
    let fem = evaluate_fem(&perturbed, &ds, &idx)?;
    let m = MetricsFile {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        realizations: idx.len(),
        rows: vec![ComparisonRow {
            cubic: cfg.system.cubic,
            hybrid_nrmse: None,
            hybrid_r2: None,
            fem_nrmse: Some(fem.mean_nrmse),
            fem_r2: Some(fem.mean_r2),
        }],
        hybrid: None,
        fem: Some(fem),
        virtual_sensing: None,
    };
    write_metrics_json(&dir.join("metrics.json"), &m)?;
    Ok(m)
}
