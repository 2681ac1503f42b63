//! Variational objective, optimizer and training loop.

mod adjoint;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{uniform_times, Graph, RealArray, Var};
use crate::model::{GaussianLatent, NeuralModalOde, EMISSION_LOGVAR};
use crate::params::ParameterStore;
use crate::simulator::{rng_for, standard_normals, streams};

pub use adjoint::{adjoint_gradient_check, AdjointField, AdjointOptions, AdjointReport, LinearField, ModalResidualField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmissionMode {
    /// Per-channel log-variance is trained with everything else.
    Learned,
    /// Log-variance stays at its initial value.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// KL weight β.
    pub beta: f64,
    /// Ramp β linearly over the first 10% of epochs.
    pub kl_warmup: bool,
    /// Steps per training subsequence; realizations are cut into
    /// non-overlapping pieces of this length.
    pub segment_steps: usize,
    /// Caps the number of batches drawn per epoch; `None` uses them all.
    pub max_batches_per_epoch: Option<usize>,
    /// Leading epochs that train only the encoder (and emission variance)
    /// against the modal model, with the residual network held fixed.
    pub physics_warmup_epochs: usize,
    /// Subsequence length during the physics warm-up.
    pub physics_warmup_segment_steps: usize,
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    pub emission: EmissionMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 300,
            beta: 1.0,
            kl_warmup: false,
            segment_steps: 500,
            max_batches_per_epoch: None,
            physics_warmup_epochs: 0,
            physics_warmup_segment_steps: 50,
            early_stop_window: 20,
            early_stop_tol: 1e-5,
            emission: EmissionMode::Learned,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::ConfigInvalid {
                key: format!("train.{key}"),
                reason: reason.into(),
            })
        };
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta", "must be non-negative");
        }
        if self.segment_steps == 0 {
            return bad("segment_steps", "must be positive");
        }
        if self.physics_warmup_segment_steps == 0 {
            return bad("physics_warmup_segment_steps", "must be positive");
        }
        if self.max_batches_per_epoch == Some(0) {
            return bad("max_batches_per_epoch", "must be positive");
        }
        if self.early_stop_window == 0 {
            return bad("early_stop_window", "must be positive");
        }
        if !(self.early_stop_tol >= 0.0) {
            return bad("early_stop_tol", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        Ok(())
    }

    /// β in effect during `epoch` (0-based).
    pub fn beta_at(&self, epoch: usize) -> f64 {
        if !self.kl_warmup {
            return self.beta;
        }
        let ramp = (self.epochs as f64 * 0.1).ceil().max(1.0);
        self.beta * ((epoch + 1) as f64 / ramp).min(1.0)
    }
}

/// `log N(x; μ̂, diag(var))`.
pub fn gaussian_log_likelihood(x: &[f64], mu_hat: &[f64], var_hat: &[f64]) -> Result<f64> {
    if x.len() != mu_hat.len() || x.len() != var_hat.len() {
        return Err(Error::dim("log-likelihood", &[x.len()], &[mu_hat.len(), var_hat.len()]));
    }
    let mut acc = x.len() as f64 * (2.0 * PI).ln();
    for ((x, m), v) in x.iter().zip(mu_hat).zip(var_hat) {
        if !(*v > 0.0) {
            return Err(Error::Input(format!("emission variance {v} is not positive")));
        }
        acc += v.ln() + (x - m) * (x - m) / v;
    }
    Ok(-0.5 * acc)
}

/// `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn kl_initial(g: &GaussianLatent) -> Result<f64> {
    if g.mu.len() != g.sigma.len() {
        return Err(Error::dim("kl", &[g.mu.len()], &[g.sigma.len()]));
    }
    let mut acc = -0.5 * g.mu.len() as f64;
    for (m, s) in g.mu.iter().zip(&g.sigma) {
        if !(*s > 0.0) {
            return Err(Error::Input(format!("latent standard deviation {s} is not positive")));
        }
        acc += -s.ln() + 0.5 * (s * s + m * m);
    }
    Ok(acc)
}

/// Per-sequence averages of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// `−Σ_t log p(x_t | z_t)`
    pub recon: f64,
    /// `β (T+1) KL`
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct ElboEvaluation {
    pub breakdown: LossBreakdown,
    /// Gradient of `total` per parameter entry, when requested.
    pub gradients: Option<BTreeMap<String, RealArray>>,
}

struct LossNodes {
    total: Var,
    loglik: Var,
    kl: Var,
}

#[allow(clippy::too_many_arguments)]
fn batch_loss(
    model: &NeuralModalOde,
    g: &mut Graph,
    params: &ParameterStore,
    segments: &[&RealArray],
    eps: &[Vec<f64>],
    dt: f64,
    beta: f64,
    trainable: bool,
    physics_only: bool,
) -> Result<LossNodes> {
    let b = segments.len();
    let d = model.latent_dim();
    let m = model.obs_dim();
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if eps.len() != b || eps.iter().any(|e| e.len() != d) {
        return Err(Error::Input(format!("expected {b} noise draws of length {d}")));
    }
    let n = segments[0].rows();
    if segments.iter().any(|s| s.rows() != n || s.cols() != m) {
        return Err(Error::Input("batch sequences must share one shape".into()));
    }
    let times = uniform_times(0.0, dt, n - 1);

    let mut bp = model.bind(g, params, trainable)?;
    if physics_only {
        bp.disable_residual();
    }
    let xs = model.window_inputs(g, segments)?;
    let (mu, sigma) = model.encode(g, &bp, &xs)?;
    let noise = g.constant(RealArray::matrix(b, d, eps.concat())?);
    let z0 = model.sample(g, mu, sigma, noise)?;
    let (zs, dz) = model.integrate(g, &bp, z0, &times)?;
    let obs = model.observation_ops(g);

    let mut squares = Vec::with_capacity(n);
    for (t, (z, zd)) in zs.iter().zip(&dz).enumerate() {
        let pred = model.observe(g, &obs, *z, *zd)?;
        let mut target = Vec::with_capacity(b * m);
        for s in segments {
            target.extend_from_slice(s.row(t));
        }
        let target = g.constant(RealArray::matrix(b, m, target)?);
        let r = g.sub(pred, target)?;
        squares.push((1.0, g.square(r)?));
    }
    let sq = g.lincomb(&squares)?;
    let logvar = bp.get(EMISSION_LOGVAR);
    let neg = g.scale(logvar, -1.0)?;
    let inv_var = g.exp(neg)?;
    let weighted = g.mul_row(sq, inv_var)?;
    let quad = g.sum(weighted)?;
    let logdet = g.sum(logvar)?;
    let count = (n * b) as f64;
    let loglik = g.lincomb(&[(-0.5, quad), (-0.5 * count, logdet)])?;
    let loglik = g.offset(loglik, -0.5 * count * m as f64 * (2.0 * PI).ln())?;

    let log_sigma = g.ln(sigma)?;
    let sum_log_sigma = g.sum(log_sigma)?;
    let sigma_sq = g.square(sigma)?;
    let sum_sigma_sq = g.sum(sigma_sq)?;
    let mu_sq = g.square(mu)?;
    let sum_mu_sq = g.sum(mu_sq)?;
    let kl = g.lincomb(&[(-1.0, sum_log_sigma), (0.5, sum_sigma_sq), (0.5, sum_mu_sq)])?;
    let kl = g.offset(kl, -0.5 * (b * d) as f64)?;

    let inv_b = 1.0 / b as f64;
    let total = g.lincomb(&[(-inv_b, loglik), (beta * n as f64 * inv_b, kl)])?;
    Ok(LossNodes { total, loglik, kl })
}

/// Negative ELBO averaged over the batch, with one `z₀` draw per sequence.
/// Each segment is `(T+1) × m`; the encoder reads its first `n_t + 1` rows.
pub fn elbo_loss(
    model: &NeuralModalOde,
    params: &ParameterStore,
    segments: &[&RealArray],
    eps: &[Vec<f64>],
    dt: f64,
    beta: f64,
    with_gradients: bool,
) -> Result<ElboEvaluation> {
    elbo_loss_impl(model, params, segments, eps, dt, beta, with_gradients, false)
}

#[allow(clippy::too_many_arguments)]
fn elbo_loss_impl(
    model: &NeuralModalOde,
    params: &ParameterStore,
    segments: &[&RealArray],
    eps: &[Vec<f64>],
    dt: f64,
    beta: f64,
    with_gradients: bool,
    physics_only: bool,
) -> Result<ElboEvaluation> {
    let mut g = Graph::new();
    let nodes = batch_loss(model, &mut g, params, segments, eps, dt, beta, with_gradients, physics_only)?;
    let b = segments.len() as f64;
    let n = segments[0].rows() as f64;
    let breakdown = LossBreakdown {
        recon: -g.scalar(nodes.loglik) / b,
        kl: beta * n * g.scalar(nodes.kl) / b,
        total: g.scalar(nodes.total),
    };
    let gradients = if with_gradients && breakdown.total.is_finite() {
        Some(g.backward(nodes.total)?.into_named())
    } else {
        None
    };
    Ok(ElboEvaluation { breakdown, gradients })
}

/// Adaptive-moment optimizer; moments and the step counter live in the store.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }

    pub fn step(&self, store: &mut ParameterStore, grads: &BTreeMap<String, RealArray>) -> Result<()> {
        store.meta.optimizer_step += 1;
        let t = store.meta.optimizer_step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let value = store
                .get(name)
                .ok_or_else(|| Error::Compatibility(format!("gradient for unknown entry `{name}`")))?;
            if value.shape() != grad.shape() {
                return Err(Error::dim("adam", value.shape(), grad.shape()));
            }
            let (mut m, mut v) = match store.moments(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (RealArray::zeros(grad.shape()), RealArray::zeros(grad.shape())),
            };
            let mut value = value.clone();
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            *store.get_mut(name).expect("checked above") = value;
            store.set_moments(name, m, v);
        }
        Ok(())
    }
}

/// Cuts every sequence into non-overlapping pieces of `steps + 1` samples.
/// A sequence shorter than one piece is used whole.
pub fn training_segments(sequences: &[&RealArray], steps: usize) -> Result<Vec<RealArray>> {
    let mut out = Vec::new();
    for s in sequences {
        let (rows, cols) = (s.rows(), s.cols());
        if rows < steps + 1 {
            out.push((*s).clone());
            continue;
        }
        let mut start = 0;
        while start + steps < rows {
            let data = s.data()[start * cols..(start + steps + 1) * cols].to_vec();
            out.push(RealArray::matrix(steps + 1, cols, data)?);
            start += steps;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub recon_term: f64,
    pub kl_term: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterStore,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn epoch_rng(seed: u64, epoch: usize) -> rand_chacha::ChaCha8Rng {
    rng_for(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), streams::TRAINING)
}

fn plateaued(totals: &[f64], window: usize, tol: f64) -> bool {
    if totals.len() <= window {
        return false;
    }
    let now = totals[totals.len() - 1];
    let then = totals[totals.len() - 1 - window];
    (now - then).abs() <= tol * then.abs().max(f64::MIN_POSITIVE)
}

/// Runs epochs `params.meta.epoch .. config.epochs` over the training
/// `sequences` (each `(T+1) × m`), so a checkpoint written by `on_epoch` can be
/// passed back in to resume. `on_epoch` sees only finite epochs; a
/// non-finite batch loss aborts before the update.
pub fn train_model(
    model: &NeuralModalOde,
    sequences: &[&RealArray],
    dt: f64,
    config: &TrainConfig,
    seed: u64,
    mut params: ParameterStore,
    on_epoch: &mut dyn FnMut(&EpochRecord, &ParameterStore) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if sequences.is_empty() {
        return Err(Error::Input("no training sequences".into()));
    }
    let expected = model.init_parameters(0);
    params.check_compatible(&expected)?;
    params.meta.seed = seed;
    let segments = training_segments(sequences, config.segment_steps)?;
    let warmup_segments = if config.physics_warmup_epochs > params.meta.epoch {
        training_segments(sequences, config.physics_warmup_segment_steps)?
    } else {
        Vec::new()
    };
    let adam = Adam::from_config(config);
    let d = model.latent_dim();
    let mut log = Vec::new();
    let mut totals = Vec::new();
    let mut stopped_early = false;

    for epoch in params.meta.epoch..config.epochs {
        let warmup = epoch < config.physics_warmup_epochs;
        let pool = if warmup { &warmup_segments } else { &segments };
        let physics_only = warmup && residual_is_zero(&params);
        let mut rng = epoch_rng(seed, epoch);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let beta = config.beta_at(epoch);
        let mut sum = LossBreakdown::default();
        let mut seen = 0usize;
        let batches = order.chunks(config.batch_size);
        let limit = config.max_batches_per_epoch.unwrap_or(usize::MAX);
        for (bi, chunk) in batches.take(limit).enumerate() {
            let batch: Vec<&RealArray> = chunk.iter().map(|&i| &pool[i]).collect();
            let eps: Vec<Vec<f64>> = (0..batch.len()).map(|_| standard_normals(&mut rng, d)).collect();
            let eval = elbo_loss_impl(model, &params, &batch, &eps, dt, beta, true, physics_only);
            let eval = match eval {
                Ok(e) if e.breakdown.total.is_finite() => e,
                Ok(_) | Err(Error::Divergence { .. }) => {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: bi + 1,
                    })
                }
                Err(e) => return Err(e),
            };
            let mut grads = eval.gradients.expect("requested");
            if grads.values().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi + 1,
                });
            }
            if config.emission == EmissionMode::Fixed {
                grads.remove(EMISSION_LOGVAR);
            }
            if warmup {
                grads.retain(|k, _| !k.starts_with("dyn."));
            }
            adam.step(&mut params, &grads)?;
            let w = batch.len() as f64;
            sum.recon += w * eval.breakdown.recon;
            sum.kl += w * eval.breakdown.kl;
            sum.total += w * eval.breakdown.total;
            seen += batch.len();
        }
        let n = seen as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            recon_term: sum.recon / n,
            kl_term: sum.kl / n,
            total: sum.total / n,
        };
        params.meta.epoch = epoch + 1;
        on_epoch(&record, &params)?;
        log.push(record);
        // Loss levels are not comparable across the warm-up boundary.
        if !warmup {
            totals.push(record.total);
        }
        if plateaued(&totals, config.early_stop_window, config.early_stop_tol) {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        stopped_early,
    })
}

fn residual_is_zero(params: &ParameterStore) -> bool {
    ["dyn.w3", "dyn.b3"]
        .iter()
        .all(|k| params.get(k).is_some_and(|v| v.data().iter().all(|x| *x == 0.0)))
}

pub fn format_loss_log(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,recon_term,kl_term,total\n");
    for r in records {
        let _ = writeln!(s, "{},{:.17e},{:.17e},{:.17e}", r.epoch, r.recon_term, r.kl_term, r.total);
    }
    s
}

pub fn write_loss_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    fs::write(path, format_loss_log(records)).map_err(|e| Error::io(path, e))
}

/// Reads a log written by [`write_loss_log`], e.g. to extend it on resume.
pub fn read_loss_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let entry = format!("loss log line {}", i + 1);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Parse {
                entry,
                reason: "expected 4 fields".into(),
            });
        }
        let num = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                entry: entry.clone(),
                reason: format!("not a number: {s}"),
            })
        };
        out.push(EpochRecord {
            epoch: f[0].trim().parse().map_err(|_| Error::Parse {
                entry: entry.clone(),
                reason: format!("bad epoch: {}", f[0]),
            })?,
            recon_term: num(f[1])?,
            kl_term: num(f[2])?,
            total: num(f[3])?,
        });
    }
    Ok(out)
}
