//! Accuracy metrics, virtual sensing and full-field export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RealArray;
use crate::model::NeuralModalOde;
use crate::modal::StructuralSystem;
use crate::params::ParameterStore;
use crate::simulator::{fem_baseline_predict, write_response_csv, Channel, Dataset, MeasurementSpec, Response};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: String,
    /// `None` when the truth is constant and the range normalizer vanishes.
    pub nrmse: Option<f64>,
    pub r2: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub channels: Vec<ChannelMetrics>,
    /// Mean over channels with a defined value.
    pub mean_nrmse: f64,
    pub mean_r2: f64,
    /// Channels left out of the means because their truth is constant.
    pub excluded: Vec<String>,
}

impl MetricsReport {
    pub fn channel(&self, name: &str) -> Option<&ChannelMetrics> {
        self.channels.iter().find(|c| c.channel == name)
    }

    fn from_channels(channels: Vec<ChannelMetrics>) -> Self {
        let mut excluded = Vec::new();
        let (mut sn, mut nn, mut sr, mut nr) = (0.0, 0usize, 0.0, 0usize);
        for c in &channels {
            match c.nrmse {
                Some(v) => {
                    sn += v;
                    nn += 1;
                }
                None => excluded.push(c.channel.clone()),
            }
            if let Some(v) = c.r2 {
                sr += v;
                nr += 1;
            }
        }
        Self {
            mean_nrmse: if nn > 0 { sn / nn as f64 } else { f64::NAN },
            mean_r2: if nr > 0 { sr / nr as f64 } else { f64::NAN },
            channels,
            excluded,
        }
    }

    /// Averages per-channel values of several reports (e.g. one per test
    /// realization) channel by channel.
    pub fn average(reports: &[MetricsReport]) -> Result<Self> {
        let first = match reports.first() {
            Some(r) => r,
            None => return Ok(Self::from_channels(Vec::new())),
        };
        let names: Vec<&str> = first.channels.iter().map(|c| c.channel.as_str()).collect();
        let mut channels = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            let (mut sn, mut nn, mut sr, mut nr) = (0.0, 0usize, 0.0, 0usize);
            for r in reports {
                let c = r
                    .channels
                    .get(k)
                    .filter(|c| c.channel == *name)
                    .ok_or_else(|| Error::Input("reports cover different channels".into()))?;
                if let Some(v) = c.nrmse {
                    sn += v;
                    nn += 1;
                }
                if let Some(v) = c.r2 {
                    sr += v;
                    nr += 1;
                }
            }
            channels.push(ChannelMetrics {
                channel: name.to_string(),
                nrmse: (nn > 0).then(|| sn / nn as f64),
                r2: (nr > 0).then(|| sr / nr as f64),
            });
        }
        Ok(Self::from_channels(channels))
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>12} {:>12}\n", "channel", "NRMSE", "R2");
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        for c in &self.channels {
            let _ = writeln!(s, "{:<10} {:>12} {:>12}", c.channel, fmt(c.nrmse), fmt(c.r2));
        }
        let _ = writeln!(s, "{:<10} {:>12.4} {:>12.4}", "mean", self.mean_nrmse, self.mean_r2);
        s
    }
}

fn channel_metrics(name: String, truth: &[f64], pred: &[f64]) -> ChannelMetrics {
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let (lo, hi) = truth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = hi - lo;
    ChannelMetrics {
        channel: name,
        nrmse: (range > 0.0).then(|| (ss_res / n).sqrt() / range),
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
    }
}

/// Per-column NRMSE (RMSE over the truth range) and `R² = 1 − SS_res/SS_tot`.
pub fn compute_metrics(truth: &RealArray, pred: &RealArray, names: &[String]) -> Result<MetricsReport> {
    if truth.shape() != pred.shape() {
        return Err(Error::dim("metrics", truth.shape(), pred.shape()));
    }
    if names.len() != truth.cols() {
        return Err(Error::Input(format!(
            "{} channel names for {} columns",
            names.len(),
            truth.cols()
        )));
    }
    if truth.rows() == 0 {
        return Err(Error::Input("no samples to score".into()));
    }
    let channels = names
        .iter()
        .enumerate()
        .map(|(c, name)| channel_metrics(name.clone(), &truth.column(c), &pred.column(c)))
        .collect();
    Ok(MetricsReport::from_channels(channels))
}

/// Metrics over the listed channels of two full-field responses.
pub fn response_metrics(truth: &Response, pred: &Response, channels: &[Channel]) -> Result<MetricsReport> {
    if truth.samples() != pred.samples() || truth.dof() != pred.dof() {
        return Err(Error::dim(
            "response metrics",
            &[truth.samples(), truth.dof()],
            &[pred.samples(), pred.dof()],
        ));
    }
    let names: Vec<String> = channels.iter().map(Channel::to_string).collect();
    compute_metrics(&truth.select(channels)?, &pred.select(channels)?, &names)
}

/// All `3g` displacement, velocity and acceleration channels.
pub fn full_field_metrics(truth: &Response, pred: &Response) -> Result<MetricsReport> {
    response_metrics(truth, pred, &Channel::all(truth.dof()))
}

/// Metrics on channels that were never measured during training.
pub fn virtual_sensing_report(
    pred: &Response,
    truth: &Response,
    held_out: &[Channel],
    training_spec: &MeasurementSpec,
) -> Result<MetricsReport> {
    if let Some(c) = held_out.iter().find(|c| training_spec.channels.contains(c)) {
        return Err(Error::Protocol(format!(
            "held-out channel {c} was measured during training"
        )));
    }
    if held_out.is_empty() {
        return Ok(MetricsReport::from_channels(Vec::new()));
    }
    response_metrics(truth, pred, held_out)
}

/// Writes `disp.csv`, `vel.csv`, `acc.csv` (`T+1` rows × `g` columns) and
/// `snapshots.csv` with the displacement vector at each requested instant
/// (nearest sample).
pub fn export_full_field(dir: &Path, times: &[f64], response: &Response, snapshots: &[f64]) -> Result<()> {
    if times.len() != response.samples() {
        return Err(Error::dim("export", &[times.len()], &[response.samples()]));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_response_csv(&dir.join("disp.csv"), times, &response.disp)?;
    write_response_csv(&dir.join("vel.csv"), times, &response.vel)?;
    write_response_csv(&dir.join("acc.csv"), times, &response.acc)?;

    let mut rows = Vec::with_capacity(snapshots.len());
    let mut stamps = Vec::with_capacity(snapshots.len());
    for &s in snapshots {
        let (first, last) = (times[0], times[times.len() - 1]);
        if !(s >= first && s <= last) {
            return Err(Error::Input(format!("snapshot instant {s} outside [{first}, {last}]")));
        }
        let k = times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - s).abs().total_cmp(&(b.1 - s).abs()))
            .map(|(k, _)| k)
            .expect("non-empty");
        stamps.push(times[k]);
        rows.push(response.disp.row(k).to_vec());
    }
    let snap = if rows.is_empty() {
        RealArray::zeros(&[0, response.dof()])
    } else {
        RealArray::stack_rows(&rows)?
    };
    write_response_csv(&dir.join("snapshots.csv"), &stamps, &snap)
}

/// Realizations predicted per batch; bounds memory on long test splits.
const EVAL_CHUNK: usize = 50;

/// Full-field metrics of the trained model's mean prediction, averaged over
/// the realizations in `indices`, and the virtual-sensing report on
/// `held_out` (empty report when `held_out` is empty).
pub fn evaluate_hybrid(
    model: &NeuralModalOde,
    params: &ParameterStore,
    ds: &Dataset,
    indices: &[usize],
    held_out: &[Channel],
) -> Result<(MetricsReport, MetricsReport)> {
    if indices.is_empty() {
        return Err(Error::Input("no realizations to evaluate".into()));
    }
    let spec = ds.manifest.measurement_spec();
    let times = ds.manifest.times();
    let (mut full, mut virt) = (Vec::new(), Vec::new());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let windows: Vec<&RealArray> = chunk.iter().map(|&i| &ds.measured[i]).collect();
        let preds = model.predict_batch(params, &windows, &times, None)?;
        for (pred, &i) in preds.iter().zip(chunk) {
            let truth = &ds.truth[i].response;
            full.push(full_field_metrics(truth, &pred.response)?);
            virt.push(virtual_sensing_report(&pred.response, truth, held_out, &spec)?);
        }
    }
    Ok((MetricsReport::average(&full)?, MetricsReport::average(&virt)?))
}

/// Full-field metrics of the perturbed linear physics model started from the
/// true initial state.
pub fn evaluate_fem(sys_perturbed: &StructuralSystem, ds: &Dataset, indices: &[usize]) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::Input("no realizations to evaluate".into()));
    }
    let spec = ds.manifest.measurement_spec();
    let reports = indices
        .iter()
        .map(|&i| {
            let b = fem_baseline_predict(sys_perturbed, &ds.truth[i], &spec, ds.manifest.substeps)?;
            full_field_metrics(&ds.truth[i].response, &b.response)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::average(&reports)
}

/// One row of the hybrid-versus-baseline comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub cubic: f64,
    pub hybrid_nrmse: Option<f64>,
    pub hybrid_r2: Option<f64>,
    pub fem_nrmse: Option<f64>,
    pub fem_r2: Option<f64>,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub seed: u64,
    pub realizations: usize,
    pub rows: Vec<ComparisonRow>,
    pub hybrid: Option<MetricsReport>,
    pub fem: Option<MetricsReport>,
    pub virtual_sensing: Option<MetricsReport>,
}

pub fn write_metrics_json(path: &Path, m: &MetricsFile) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(m).expect("metrics serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_json(path: &Path) -> Result<MetricsFile> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: "metrics file",
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        entry: path.display().to_string(),
        reason: e.to_string(),
    })
}
