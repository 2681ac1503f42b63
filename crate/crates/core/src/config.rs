//! Run configuration: defaults, a JSON file, then `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::modal::StructuralSystem;
use crate::simulator::{Channel, GenerateOptions, MeasurementSpec};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    /// The built-in four-storey shear frame.
    Frame4dof,
    /// `M`, `C`, `K` read from whitespace-separated text matrices.
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub kind: SystemKind,
    /// Cubic spring coefficient `k_n`.
    pub cubic: f64,
    /// Equation (one-based) that receives the cubic force `k_n·x₁³`.
    pub cubic_equation: usize,
    pub mass: Option<PathBuf>,
    pub damping: Option<PathBuf>,
    pub stiffness: Option<PathBuf>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            kind: SystemKind::Frame4dof,
            cubic: 0.0,
            cubic_equation: 1,
            mass: None,
            damping: None,
            stiffness: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub realizations: usize,
    pub dt: f64,
    pub steps: usize,
    pub substeps: usize,
    pub train_fraction: f64,
    pub noise_rms_fraction: f64,
    pub channels: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let g = GenerateOptions::default();
        let spec = MeasurementSpec::standard();
        Self {
            realizations: g.realizations,
            dt: g.dt,
            steps: g.steps,
            substeps: g.substeps,
            train_fraction: g.train_fraction,
            noise_rms_fraction: spec.noise_rms_fraction,
            channels: spec.channels.iter().map(Channel::to_string).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Never-measured channels scored for virtual sensing.
    pub held_out: Vec<String>,
    /// Instants (seconds) exported as full-field snapshots by `reconstruct`.
    pub snapshots: Vec<f64>,
    /// Test realization reconstructed by `reconstruct` (position in the test split).
    pub reconstruct_index: usize,
    /// Caps the number of test realizations scored; `None` scores all.
    pub max_realizations: Option<usize>,
    /// Relative spread of the one-time FEM-baseline perturbation.
    pub fem_perturbation: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            held_out: vec!["disp_2".into()],
            snapshots: vec![0.0, 5.0, 10.0, 25.0],
            reconstruct_index: 0,
            max_realizations: None,
            fem_perturbation: 0.03,
        }
    }
}

/// Artifact locations. Unset entries resolve under the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub output: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub system: SystemConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: GenerateOptions::default().seed,
            system: SystemConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::ConfigInvalid {
        key: key.into(),
        reason: reason.into(),
    }
}

fn parse_channels(key: &str, names: &[String]) -> Result<Vec<Channel>> {
    names
        .iter()
        .map(|n| n.parse().map_err(|e: Error| invalid(key, e.to_string())))
        .collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if !s.cubic.is_finite() {
            return Err(invalid("system.cubic", "must be finite"));
        }
        if s.cubic_equation == 0 {
            return Err(invalid("system.cubic_equation", "equations are numbered from 1"));
        }
        if s.kind == SystemKind::Frame4dof && s.cubic_equation > 4 {
            return Err(invalid("system.cubic_equation", "the built-in frame has 4 equations"));
        }
        if s.kind == SystemKind::Files {
            for (k, v) in [("system.mass", &s.mass), ("system.damping", &s.damping), ("system.stiffness", &s.stiffness)] {
                if v.is_none() {
                    return Err(invalid(k, "required when system.kind is \"files\""));
                }
            }
        }
        let d = &self.dataset;
        if d.realizations == 0 {
            return Err(invalid("dataset.realizations", "must be positive"));
        }
        if !(d.dt > 0.0 && d.dt.is_finite()) {
            return Err(invalid("dataset.dt", "must be positive"));
        }
        if d.steps == 0 {
            return Err(invalid("dataset.steps", "must be positive"));
        }
        if d.substeps == 0 {
            return Err(invalid("dataset.substeps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&d.train_fraction) {
            return Err(invalid("dataset.train_fraction", "must lie in [0, 1]"));
        }
        if !(d.noise_rms_fraction >= 0.0 && d.noise_rms_fraction.is_finite()) {
            return Err(invalid("dataset.noise_rms_fraction", "must be non-negative"));
        }
        if d.channels.is_empty() {
            return Err(invalid("dataset.channels", "at least one channel is required"));
        }
        let measured = parse_channels("dataset.channels", &d.channels)?;
        let held = parse_channels("eval.held_out", &self.eval.held_out)?;
        if let Some(c) = held.iter().find(|c| measured.contains(c)) {
            return Err(invalid("eval.held_out", format!("{c} is a training channel")));
        }
        if self.eval.snapshots.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(invalid("eval.snapshots", "instants must be non-negative"));
        }
        if self.eval.max_realizations == Some(0) {
            return Err(invalid("eval.max_realizations", "must be positive"));
        }
        if !(self.eval.fem_perturbation >= 0.0 && self.eval.fem_perturbation.is_finite()) {
            return Err(invalid("eval.fem_perturbation", "must be non-negative"));
        }
        if self.model.window > d.steps {
            return Err(invalid("model.window", "exceeds dataset.steps"));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn measurement_spec(&self) -> Result<MeasurementSpec> {
        Ok(MeasurementSpec {
            channels: parse_channels("dataset.channels", &self.dataset.channels)?,
            noise_rms_fraction: self.dataset.noise_rms_fraction,
        })
    }

    pub fn held_out_channels(&self) -> Result<Vec<Channel>> {
        parse_channels("eval.held_out", &self.eval.held_out)
    }

    pub fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            realizations: self.dataset.realizations,
            dt: self.dataset.dt,
            steps: self.dataset.steps,
            substeps: self.dataset.substeps,
            train_fraction: self.dataset.train_fraction,
            seed: self.seed,
        }
    }

    /// The ground-truth system, including the cubic spring.
    pub fn system(&self) -> Result<StructuralSystem> {
        let s = &self.system;
        let sys = match s.kind {
            SystemKind::Frame4dof => StructuralSystem::frame_4dof(s.cubic),
            SystemKind::Files => {
                let path = |p: &Option<PathBuf>| p.clone().expect("validated");
                StructuralSystem::from_files(&path(&s.mass), &path(&s.damping), &path(&s.stiffness), s.cubic)?
            }
        };
        sys.with_cubic_row(s.cubic_equation - 1)
            .map_err(|e| invalid("system.cubic_equation", e.to_string()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("run"))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.dataset.clone().unwrap_or_else(|| self.output_dir().join("dataset"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.output_dir().join("checkpoint.txt"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, excluding artifact paths so the same
    /// experiment hashes identically wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        let text = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads `path` (if given) over the defaults, then applies `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|source| Error::ConfigMissing {
            path: path.to_path_buf(),
            source,
        })?;
        let file: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(&text).map_err(|e| Error::ConfigMalformed(format!("{}: {e}", path.display())))?
        };
        if !file.is_object() {
            return Err(Error::ConfigMalformed(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut doc, file, "")?;
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::ConfigMalformed(format!("override `{o}` is not key=value")))?;
        let key = key.trim();
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        set_path(&mut doc, key, value)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let key = e.path().to_string();
        invalid(&key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Overlays `src` on `dst`, rejecting keys absent from the defaults. Keys
/// whose default is `null` accept any value.
fn merge(dst: &mut Value, src: Value, prefix: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = join(prefix, &k);
                match d.get_mut(&k) {
                    None => return Err(Error::ConfigUnknownKey(path)),
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &path)?,
                    Some(slot) if slot.is_object() => {
                        return Err(invalid(&path, "expected a section (JSON object)"));
                    }
                    Some(slot) => *slot = v,
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::ConfigMalformed(format!("override key `{key}` is empty or malformed")));
    }
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let path = parts[..=i].join(".");
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| invalid(&parts[..i].join("."), "not a section"))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::ConfigUnknownKey(path.clone()))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(invalid(&path, "is a section; set one of its keys"));
            }
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("loop returns on the last part")
}

fn join(prefix: &str, k: &str) -> String {
    if prefix.is_empty() {
        k.to_string()
    } else {
        format!("{prefix}.{k}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = file("");
        let c = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.window, 10);
        assert_eq!(c.model.modes, 4);
        assert_eq!(c.system.kind, SystemKind::Frame4dof);
        let f = file("{}");
        assert_eq!(parse_config(Some(f.path()), &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn override_beats_file() {
        let f = file(r#"{"train": {"lr": 0.01}, "seed": 7}"#);
        let c = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.seed, 7);
        let c = parse_config(Some(f.path()), &["train.lr=1e-4".into()]).unwrap();
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn unknown_keys_are_named() {
        let f = file(r#"{"model": {"pp": 3}}"#);
        match parse_config(Some(f.path()), &[]) {
            Err(Error::ConfigUnknownKey(k)) => assert_eq!(k, "model.pp"),
            other => panic!("{other:?}"),
        }
        match parse_config(None, &["model.pp=3".into()]) {
            Err(Error::ConfigUnknownKey(k)) => assert_eq!(k, "model.pp"),
            other => panic!("{other:?}"),
        }
        match parse_config(None, &["bogus=1".into()]) {
            Err(Error::ConfigUnknownKey(k)) => assert_eq!(k, "bogus"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distinct_error_classes() {
        let missing = Path::new("/nonexistent/run.json");
        assert!(matches!(parse_config(Some(missing), &[]), Err(Error::ConfigMissing { .. })));
        let f = file("{ not json");
        assert!(matches!(parse_config(Some(f.path()), &[]), Err(Error::ConfigMalformed(_))));
        match parse_config(None, &["train.lr=-1".into()]) {
            Err(Error::ConfigInvalid { key, .. }) => assert_eq!(key, "train.lr"),
            other => panic!("{other:?}"),
        }
        match parse_config(None, &["eval.held_out=[\"acc_1\"]".into()]) {
            Err(Error::ConfigInvalid { key, .. }) => assert_eq!(key, "eval.held_out"),
            other => panic!("{other:?}"),
        }
        match parse_config(None, &["system.cubic_equation=9".into()]) {
            Err(Error::ConfigInvalid { key, .. }) => assert_eq!(key, "system.cubic_equation"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config(None, &["train.lr".into()]), Err(Error::ConfigMalformed(_))));
        match parse_config(None, &["train.epochs=many".into()]) {
            Err(Error::ConfigInvalid { key, .. }) => assert_eq!(key, "train.epochs"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_parse_json_and_bare_strings() {
        let c = parse_config(
            None,
            &[
                "system.kind=frame4dof".into(),
                "dataset.channels=[\"acc_1\",\"disp_4\"]".into(),
                "train.max_batches_per_epoch=3".into(),
                "paths.output=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.dataset.channels, vec!["acc_1", "disp_4"]);
        assert_eq!(c.train.max_batches_per_epoch, Some(3));
        assert_eq!(c.checkpoint_path(), PathBuf::from("/tmp/x/checkpoint.txt"));
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.output = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.train.lr *= 2.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn effective_config_roundtrips() {
        let c = parse_config(None, &["system.cubic=0.5".into()]).unwrap();
        let f = file(&c.to_json());
        assert_eq!(parse_config(Some(f.path()), &[]).unwrap(), c);
    }
}
