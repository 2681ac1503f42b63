//! Ground-truth generation for the spring-mass chain study.
//!
//! Free-vibration realizations start from standard-normal displacements and
//! velocities and are integrated with RK4. A subset of response channels is
//! "measured" with additive Gaussian noise; the noise-free full response is
//! retained for evaluation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ode::{rk4_integrate, uniform_times, OdeSystem};
use crate::math::RealArray;
use crate::modal::{cholesky, StructuralSystem};

/// Seed streams carved out of the master seed. Each realization `i` owns
/// streams `2i` (initial condition) and `2i + 1` (measurement noise).
pub(crate) mod streams {
    pub const FEM_PERTURBATION: u64 = u64::MAX - 1;
    pub const MODEL_INIT: u64 = u64::MAX - 2;
    pub const TRAINING: u64 = u64::MAX - 3;

    pub fn initial_condition(index: usize) -> u64 {
        2 * index as u64
    }

    pub fn measurement_noise(index: usize) -> u64 {
        2 * index as u64 + 1
    }
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Displacement,
    Velocity,
    Acceleration,
}

impl Quantity {
    fn prefix(self) -> &'static str {
        match self {
            Quantity::Displacement => "disp",
            Quantity::Velocity => "vel",
            Quantity::Acceleration => "acc",
        }
    }

    pub const ALL: [Quantity; 3] = [Quantity::Displacement, Quantity::Velocity, Quantity::Acceleration];
}

/// One response channel; `dof` is zero-based, the display name one-based
/// (`acc_1` is the acceleration of the first degree of freedom).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Channel {
    pub quantity: Quantity,
    pub dof: usize,
}

impl Channel {
    pub fn new(quantity: Quantity, dof: usize) -> Self {
        Self { quantity, dof }
    }

    /// Every displacement, velocity and acceleration channel of `g` DOFs.
    pub fn all(g: usize) -> Vec<Channel> {
        Quantity::ALL
            .iter()
            .flat_map(|&q| (0..g).map(move |d| Channel::new(q, d)))
            .collect()
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.quantity.prefix(), self.dof + 1)
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("bad channel name `{s}` (expected e.g. acc_1, disp_4)"));
        let (prefix, idx) = s.split_once('_').ok_or_else(bad)?;
        let quantity = match prefix {
            "disp" => Quantity::Displacement,
            "vel" => Quantity::Velocity,
            "acc" => Quantity::Acceleration,
            _ => return Err(bad()),
        };
        let n: usize = idx.parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        Ok(Channel::new(quantity, n - 1))
    }
}

impl Serialize for Channel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Channel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSpec {
    pub channels: Vec<Channel>,
    pub noise_rms_fraction: f64,
}

impl MeasurementSpec {
    /// `ẍ₁, ẍ₃, ẍ₄, x₄` with 3% RMS noise.
    pub fn standard() -> Self {
        use Quantity::*;
        Self {
            channels: vec![
                Channel::new(Acceleration, 0),
                Channel::new(Acceleration, 2),
                Channel::new(Acceleration, 3),
                Channel::new(Displacement, 3),
            ],
            noise_rms_fraction: 0.03,
        }
    }

    pub fn validate(&self, g: usize) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Input("measurement spec has no channels".into()));
        }
        if let Some(c) = self.channels.iter().find(|c| c.dof >= g) {
            return Err(Error::Input(format!("channel {c} references a DOF beyond {g}")));
        }
        if !(self.noise_rms_fraction >= 0.0) {
            return Err(Error::Input("noise fraction must be non-negative".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.channels.len()
    }

    /// One-hot selection matrix `E` (`m × 3g`) over `[x; ẋ; ẍ]`.
    pub fn selection_matrix(&self, g: usize) -> RealArray {
        let mut e = RealArray::zeros(&[self.width(), 3 * g]);
        for (r, c) in self.channels.iter().enumerate() {
            let block = match c.quantity {
                Quantity::Displacement => 0,
                Quantity::Velocity => 1,
                Quantity::Acceleration => 2,
            };
            e.set(r, block * g + c.dof, 1.0);
        }
        e
    }
}

/// Full-order response, each quantity as a `(T+1) × g` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub disp: RealArray,
    pub vel: RealArray,
    pub acc: RealArray,
}

impl Response {
    pub fn quantity(&self, q: Quantity) -> &RealArray {
        match q {
            Quantity::Displacement => &self.disp,
            Quantity::Velocity => &self.vel,
            Quantity::Acceleration => &self.acc,
        }
    }

    pub fn channel(&self, c: Channel) -> Vec<f64> {
        self.quantity(c.quantity).column(c.dof)
    }

    pub fn samples(&self) -> usize {
        self.disp.rows()
    }

    pub fn dof(&self) -> usize {
        self.disp.cols()
    }

    /// `(T+1) × m` in channel order.
    pub fn select(&self, channels: &[Channel]) -> Result<RealArray> {
        let g = self.dof();
        if let Some(c) = channels.iter().find(|c| c.dof >= g) {
            return Err(Error::Input(format!("channel {c} references a DOF beyond {g}")));
        }
        let n = self.samples();
        let m = channels.len();
        let mut out = Vec::with_capacity(n * m);
        for t in 0..n {
            for c in channels {
                out.push(self.quantity(c.quantity).get(t, c.dof));
            }
        }
        RealArray::matrix(n, m, out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub index: usize,
    pub times: Vec<f64>,
    pub response: Response,
}

impl Realization {
    pub fn initial_state(&self) -> (Vec<f64>, Vec<f64>) {
        (self.response.disp.row(0).to_vec(), self.response.vel.row(0).to_vec())
    }
}

/// `[ẋ; ẍ]` with `ẍ = −M⁻¹(Cẋ + Kx + n(x))`, `n = k_n x₁³ e_r` for the
/// cubic row `r`.
#[derive(Clone, Debug)]
pub struct ReferenceField {
    g: usize,
    minv_c: RealArray,
    minv_k: RealArray,
    minv_cubic_col: Vec<f64>,
    cubic: f64,
}

impl ReferenceField {
    pub fn new(sys: &StructuralSystem) -> Result<Self> {
        let g = sys.dof();
        let l = cholesky(&sys.mass)?;
        // M⁻¹ = L⁻ᵀ L⁻¹, assembled column by column.
        let mut minv = RealArray::zeros(&[g, g]);
        for c in 0..g {
            let mut y = vec![0.0; g];
            for i in 0..g {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for k in 0..i {
                    s -= l.get(i, k) * y[k];
                }
                y[i] = s / l.get(i, i);
            }
            for i in (0..g).rev() {
                let mut s = y[i];
                for k in i + 1..g {
                    s -= l.get(k, i) * y[k];
                }
                y[i] = s / l.get(i, i);
            }
            for (r, v) in y.into_iter().enumerate() {
                minv.set(r, c, v);
            }
        }
        Ok(Self {
            g,
            minv_c: minv.matmul(&sys.damping)?,
            minv_k: minv.matmul(&sys.stiffness)?,
            minv_cubic_col: minv.column(sys.cubic_row),
            cubic: sys.cubic,
        })
    }

    pub fn dof(&self) -> usize {
        self.g
    }

    pub fn acceleration(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let g = self.g;
        let nl = self.cubic * x[0].powi(3);
        (0..g)
            .map(|i| {
                let cv: f64 = self.minv_c.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
                let kx: f64 = self.minv_k.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
                -(cv + kx + self.minv_cubic_col[i] * nl)
            })
            .collect()
    }

    pub fn eval(&self, state: &[f64]) -> Vec<f64> {
        let g = self.g;
        let (x, v) = state.split_at(g);
        let mut out = v.to_vec();
        out.extend(self.acceleration(x, v));
        out
    }
}

impl OdeSystem for ReferenceField {
    type State = RealArray;

    fn derivative(&mut self, _t: f64, state: &RealArray) -> Result<RealArray> {
        if state.len() != 2 * self.g {
            return Err(Error::dim("reference field", &[2 * self.g], state.shape()));
        }
        Ok(RealArray::vector(self.eval(state.data())))
    }

    fn combine(&mut self, base: &RealArray, terms: &[(f64, &RealArray)]) -> Result<RealArray> {
        let mut out = base.clone();
        for (c, t) in terms {
            out.axpy(*c, t)?;
        }
        Ok(out)
    }

    fn is_finite(&self, state: &RealArray) -> bool {
        state.all_finite()
    }
}

/// Derivative of `[x; ẋ]` under the structural equations of motion.
pub fn reference_vector_field(state: &[f64], sys: &StructuralSystem) -> Result<Vec<f64>> {
    let g = sys.dof();
    if state.len() != 2 * g {
        return Err(Error::dim("reference field", &[2 * g], &[state.len()]));
    }
    Ok(ReferenceField::new(sys)?.eval(state))
}

/// Integrates the structural model from `(x0, v0)` and stores `T+1` samples.
pub fn simulate(
    field: &ReferenceField,
    x0: &[f64],
    v0: &[f64],
    dt: f64,
    steps: usize,
    substeps: usize,
) -> Result<(Vec<f64>, Response)> {
    let g = field.dof();
    let times = uniform_times(0.0, dt, steps);
    let mut z0 = x0.to_vec();
    z0.extend_from_slice(v0);
    let mut sys = field.clone();
    let states = rk4_integrate(&mut sys, RealArray::vector(z0), 0.0, &times, substeps)?;
    let n = states.len();
    let (mut disp, mut vel, mut acc) = (
        Vec::with_capacity(n * g),
        Vec::with_capacity(n * g),
        Vec::with_capacity(n * g),
    );
    for s in &states {
        let (x, v) = s.data().split_at(g);
        disp.extend_from_slice(x);
        vel.extend_from_slice(v);
        acc.extend(field.acceleration(x, v));
    }
    Ok((
        times,
        Response {
            disp: RealArray::matrix(n, g, disp)?,
            vel: RealArray::matrix(n, g, vel)?,
            acc: RealArray::matrix(n, g, acc)?,
        },
    ))
}

pub fn mechanical_energy(sys: &StructuralSystem, x: &[f64], v: &[f64]) -> Result<f64> {
    let xa = RealArray::from_vec(x);
    let va = RealArray::from_vec(v);
    let kin = 0.5 * crate::math::array::dot(v, sys.mass.matvec(&va)?.data());
    let pot = 0.5 * crate::math::array::dot(x, sys.stiffness.matvec(&xa)?.data());
    Ok(kin + pot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub realizations: usize,
    pub dt: f64,
    pub steps: usize,
    /// RK4 steps per sample interval for the ground truth.
    pub substeps: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            realizations: 1000,
            dt: 0.05,
            steps: 500,
            substeps: 4,
            train_fraction: 0.8,
            seed: 2022,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dt: f64,
    pub steps: usize,
    pub substeps: usize,
    pub cubic: f64,
    /// Equation receiving the cubic force, zero-based.
    #[serde(default)]
    pub cubic_row: usize,
    pub seed: u64,
    pub noise_rms_fraction: f64,
    pub dof: usize,
    pub channels: Vec<Channel>,
    pub realizations: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    pub fn measurement_spec(&self) -> MeasurementSpec {
        MeasurementSpec {
            channels: self.channels.clone(),
            noise_rms_fraction: self.noise_rms_fraction,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        uniform_times(0.0, self.dt, self.steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Noise-free full response per realization.
    pub truth: Vec<Realization>,
    /// Noisy measured channels, `(T+1) × m` per realization.
    pub measured: Vec<RealArray>,
}

fn split_indices(n: usize, train_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Input(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    Ok(((0..n_train).collect(), (n_train..n).collect()))
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Adds zero-mean Gaussian noise with `std = fraction × RMS(channel)`.
fn add_noise(clean: &RealArray, fraction: f64, rng: &mut ChaCha8Rng) -> RealArray {
    let mut out = clean.clone();
    if fraction == 0.0 {
        return out;
    }
    let (n, m) = (clean.rows(), clean.cols());
    let stds: Vec<f64> = (0..m).map(|c| fraction * rms(&clean.column(c))).collect();
    for t in 0..n {
        for c in 0..m {
            let e: f64 = StandardNormal.sample(rng);
            let v = out.get(t, c) + stds[c] * e;
            out.set(t, c, v);
        }
    }
    out
}

pub fn generate_realization(
    field: &ReferenceField,
    index: usize,
    opts: &GenerateOptions,
) -> Result<Realization> {
    let g = field.dof();
    let mut rng = rng_for(opts.seed, streams::initial_condition(index));
    let ic = standard_normals(&mut rng, 2 * g);
    let (x0, v0) = ic.split_at(g);
    let (times, response) =
        simulate(field, x0, v0, opts.dt, opts.steps, opts.substeps).map_err(|e| match e {
            Error::Divergence { instant } => Error::RealizationDivergence { index, instant },
            other => other,
        })?;
    Ok(Realization {
        index,
        times,
        response,
    })
}

pub fn generate_dataset(sys: &StructuralSystem, spec: &MeasurementSpec, opts: &GenerateOptions) -> Result<Dataset> {
    if opts.realizations == 0 {
        return Err(Error::Input("at least one realization is required".into()));
    }
    if !(opts.dt > 0.0) || opts.steps == 0 || opts.substeps == 0 {
        return Err(Error::Input("dt, steps and substeps must be positive".into()));
    }
    spec.validate(sys.dof())?;
    let field = ReferenceField::new(sys)?;
    let (train, test) = split_indices(opts.realizations, opts.train_fraction)?;
    let mut truth = Vec::with_capacity(opts.realizations);
    let mut measured = Vec::with_capacity(opts.realizations);
    for i in 0..opts.realizations {
        let real = generate_realization(&field, i, opts)?;
        let clean = real.response.select(&spec.channels)?;
        let mut rng = rng_for(opts.seed, streams::measurement_noise(i));
        measured.push(add_noise(&clean, spec.noise_rms_fraction, &mut rng));
        truth.push(real);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            dt: opts.dt,
            steps: opts.steps,
            substeps: opts.substeps,
            cubic: sys.cubic,
            cubic_row: sys.cubic_row,
            seed: opts.seed,
            noise_rms_fraction: spec.noise_rms_fraction,
            dof: sys.dof(),
            channels: spec.channels.clone(),
            realizations: opts.realizations,
            train,
            test,
        },
        truth,
        measured,
    })
}

/// Linear model with every nonzero entry of `M`, `C`, `K` scaled by
/// `1 + fraction·ε`, `ε ~ N(0, 1)`. The upper triangle is drawn and mirrored.
pub fn perturb_system(sys: &StructuralSystem, fraction: f64, seed: u64) -> Result<StructuralSystem> {
    let mut rng = rng_for(seed, streams::FEM_PERTURBATION);
    let mut perturb = |m: &RealArray| {
        let n = m.rows();
        let mut out = m.clone();
        for i in 0..n {
            for j in i..n {
                let v = m.get(i, j);
                if v != 0.0 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let w = v * (1.0 + fraction * e);
                    out.set(i, j, w);
                    out.set(j, i, w);
                }
            }
        }
        out
    };
    let mass = perturb(&sys.mass);
    let damping = perturb(&sys.damping);
    let stiffness = perturb(&sys.stiffness);
    StructuralSystem::new(mass, damping, stiffness, 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselinePrediction {
    pub response: Response,
    pub measured: RealArray,
}

/// Runs the (perturbed, linear) physics model from the realization's true
/// initial state and emits noise-free channels.
pub fn fem_baseline_predict(
    sys_perturbed: &StructuralSystem,
    realization: &Realization,
    spec: &MeasurementSpec,
    substeps: usize,
) -> Result<BaselinePrediction> {
    let field = ReferenceField::new(&sys_perturbed.linearized())?;
    let (x0, v0) = realization.initial_state();
    let times = &realization.times;
    let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
    let (_, response) = simulate(&field, &x0, &v0, dt, times.len() - 1, substeps)?;
    let measured = response.select(&spec.channels)?;
    Ok(BaselinePrediction { response, measured })
}

/// `x₁` against the first-DOF restoring force `(Kx)₁ + k_n x₁³`; the cubic part
/// is included only when the cubic force acts on the first equation.
pub fn force_displacement_loop(sys: &StructuralSystem, r: &Realization) -> (Vec<f64>, Vec<f64>) {
    let x1 = r.response.disp.column(0);
    let force = (0..r.response.samples())
        .map(|t| {
            let x = r.response.disp.row(t);
            let lin: f64 = sys.stiffness.row(0).iter().zip(x).map(|(a, b)| a * b).sum();
            if sys.cubic_row == 0 {
                lin + sys.cubic * x[0].powi(3)
            } else {
                lin
            }
        })
        .collect();
    (x1, force)
}

/// Largest absolute residual of the least-squares line through `(x, y)`.
pub fn linear_fit_max_residual(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    x.iter()
        .zip(y)
        .map(|(a, b)| (b - (slope * a + icpt)).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// On-disk layout

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(path: &Path, header: &[String], times: &[f64], cols: &[&RealArray]) -> Result<()> {
    let mut s = String::new();
    s.push_str("t,");
    s.push_str(&header.join(","));
    s.push('\n');
    for (t, time) in times.iter().enumerate() {
        s.push_str(&fmt_f(*time));
        for a in cols {
            for v in a.row(t) {
                s.push(',');
                s.push_str(&fmt_f(*v));
            }
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Parses a `t,<names…>` CSV into times and a `rows × names` array.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<f64>, RealArray)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entry = path.display().to_string();
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse {
            entry: entry.clone(),
            reason: "empty file".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(Error::Parse {
            entry,
            reason: "first column must be `t`".into(),
        });
    }
    let m = header.len() - 1;
    let mut times = Vec::new();
    let mut data = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                entry: format!("{entry}:{}", ln + 2),
                reason: e.to_string(),
            })?;
        if vals.len() != m + 1 {
            return Err(Error::Parse {
                entry: format!("{entry}:{}", ln + 2),
                reason: format!("expected {} fields, found {}", m + 1, vals.len()),
            });
        }
        times.push(vals[0]);
        data.extend_from_slice(&vals[1..]);
    }
    let rows = times.len();
    let arr = RealArray::matrix(rows, m, data).map_err(|e| Error::Parse {
        entry: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok((header[1..].to_vec(), times, arr))
}

fn truth_header(g: usize) -> Vec<String> {
    Channel::all(g).iter().map(Channel::to_string).collect()
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let names: Vec<String> = ds.manifest.channels.iter().map(Channel::to_string).collect();
    for (r, meas) in ds.truth.iter().zip(&ds.measured) {
        write_csv(
            &dir.join(format!("real_{:04}.csv", r.index)),
            &names,
            &r.times,
            &[meas],
        )?;
        write_csv(
            &dir.join(format!("truth_{:04}.csv", r.index)),
            &truth_header(ds.manifest.dof),
            &r.times,
            &[&r.response.disp, &r.response.vel, &r.response.acc],
        )?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::MissingArtifact {
            what: "dataset manifest",
            path: mpath,
        });
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        entry: "manifest.json".into(),
        reason: e.to_string(),
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let g = manifest.dof;
    let names: Vec<String> = manifest.channels.iter().map(Channel::to_string).collect();
    let mut truth = Vec::with_capacity(manifest.realizations);
    let mut measured = Vec::with_capacity(manifest.realizations);
    for i in 0..manifest.realizations {
        let rpath = dir.join(format!("real_{i:04}.csv"));
        let (hdr, times, meas) = read_csv(&rpath)?;
        if hdr != names {
            return Err(Error::Parse {
                entry: rpath.display().to_string(),
                reason: format!("header {hdr:?} does not match manifest channels {names:?}"),
            });
        }
        let tpath = dir.join(format!("truth_{i:04}.csv"));
        let (thdr, _, full) = read_csv(&tpath)?;
        if thdr != truth_header(g) {
            return Err(Error::Parse {
                entry: tpath.display().to_string(),
                reason: "unexpected truth header".into(),
            });
        }
        let response = Response {
            disp: full.slice_cols(0, g)?,
            vel: full.slice_cols(g, 2 * g)?,
            acc: full.slice_cols(2 * g, 3 * g)?,
        };
        truth.push(Realization {
            index: i,
            times,
            response,
        });
        measured.push(meas);
    }
    Ok(Dataset {
        manifest,
        truth,
        measured,
    })
}

pub fn write_response_csv(path: &Path, times: &[f64], q: &RealArray) -> Result<()> {
    let header: Vec<String> = (1..=q.cols()).map(|d| format!("dof_{d}")).collect();
    write_csv(path, &header, times, &[q])
}

pub fn write_channels_csv(path: &Path, channels: &[Channel], times: &[f64], values: &RealArray) -> Result<()> {
    let header: Vec<String> = channels.iter().map(Channel::to_string).collect();
    write_csv(path, &header, times, &[values])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_opts(n: usize) -> GenerateOptions {
        GenerateOptions {
            realizations: n,
            steps: 100,
            ..GenerateOptions::default()
        }
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let sys = StructuralSystem::frame_4dof(1.0);
        assert_eq!(reference_vector_field(&[0.0; 8], &sys).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn unit_first_dof_displacement() {
        // Kx = [3, -2, 0, 0]; cubic force 1 on DOF 4; masses 1..4.
        let sys = StructuralSystem::frame_4dof(1.0).with_cubic_row(3).unwrap();
        let d = reference_vector_field(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &sys).unwrap();
        let want = [-3.0, 1.0, 0.0, -0.25];
        for (a, b) in d[4..].iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{d:?}");
        }
        // Same state with the cubic force on DOF 1.
        let sys = StructuralSystem::frame_4dof(1.0);
        let d = reference_vector_field(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &sys).unwrap();
        for (a, b) in d[4..].iter().zip([-4.0, 1.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15, "{d:?}");
        }
    }

    #[test]
    fn cubic_row_out_of_range() {
        assert!(StructuralSystem::frame_4dof(1.0).with_cubic_row(4).is_err());
    }

    #[test]
    fn cubic_on_first_dof_stays_bounded() {
        let sys = StructuralSystem::frame_4dof(1.0);
        let field = ReferenceField::new(&sys).unwrap();
        let opts = GenerateOptions::default();
        for i in 0..40 {
            let r = generate_realization(&field, i, &opts).unwrap();
            let (x0, v0) = r.initial_state();
            let e0 = mechanical_energy(&sys.linearized(), &x0, &v0).unwrap() + 0.25 * x0[0].powi(4);
            let t = r.response.samples() - 1;
            let (x, v) = (r.response.disp.row(t), r.response.vel.row(t));
            let e = mechanical_energy(&sys.linearized(), x, v).unwrap() + 0.25 * x[0].powi(4);
            assert!(e <= e0, "realization {i}");
        }
    }

    #[test]
    fn linear_field_when_cubic_is_zero() {
        let sys = StructuralSystem::frame_4dof(0.0);
        let s = [0.3, -0.2, 0.5, 1.1, 0.7, -0.4, 0.1, 0.9];
        let d = reference_vector_field(&s, &sys).unwrap();
        let x = RealArray::from_vec(&s[..4]);
        let v = RealArray::from_vec(&s[4..]);
        let f = sys.damping.matvec(&v).unwrap().add(&sys.stiffness.matvec(&x).unwrap()).unwrap();
        for i in 0..4 {
            assert!((d[4 + i] + f.data()[i] / (i as f64 + 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn eighty_twenty_split() {
        let (tr, te) = split_indices(1000, 0.8).unwrap();
        assert_eq!(tr, (0..800).collect::<Vec<_>>());
        assert_eq!(te, (800..1000).collect::<Vec<_>>());
    }

    #[test]
    fn noiseless_measurements_equal_truth() {
        let sys = StructuralSystem::frame_4dof(0.5);
        let spec = MeasurementSpec {
            noise_rms_fraction: 0.0,
            ..MeasurementSpec::standard()
        };
        let ds = generate_dataset(&sys, &spec, &small_opts(3)).unwrap();
        for (r, m) in ds.truth.iter().zip(&ds.measured) {
            assert_eq!(r.response.select(&spec.channels).unwrap(), *m);
        }
    }

    #[test]
    fn stored_acceleration_is_consistent() {
        let sys = StructuralSystem::frame_4dof(1.0);
        let ds = generate_dataset(&sys, &MeasurementSpec::standard(), &small_opts(2)).unwrap();
        let field = ReferenceField::new(&sys).unwrap();
        for r in &ds.truth {
            for t in 0..r.response.samples() {
                let a = field.acceleration(r.response.disp.row(t), r.response.vel.row(t));
                for (x, y) in a.iter().zip(r.response.acc.row(t)) {
                    assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn linear_energy_never_increases() {
        let sys = StructuralSystem::frame_4dof(0.0);
        let ds = generate_dataset(&sys, &MeasurementSpec::standard(), &small_opts(5)).unwrap();
        for r in &ds.truth {
            let mut prev = f64::INFINITY;
            for t in 0..r.response.samples() {
                let e = mechanical_energy(&sys, r.response.disp.row(t), r.response.vel.row(t)).unwrap();
                assert!(e <= prev * (1.0 + 1e-12), "energy rose at sample {t}");
                prev = e;
            }
        }
    }

    #[test]
    fn initial_conditions_shared_across_cubic_coefficients() {
        let spec = MeasurementSpec::standard();
        let a = generate_dataset(&StructuralSystem::frame_4dof(0.0), &spec, &small_opts(3)).unwrap();
        let b = generate_dataset(&StructuralSystem::frame_4dof(1.0), &spec, &small_opts(3)).unwrap();
        for (ra, rb) in a.truth.iter().zip(&b.truth) {
            assert_eq!(ra.initial_state(), rb.initial_state());
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let sys = StructuralSystem::frame_4dof(0.5);
        let spec = MeasurementSpec::standard();
        let a = generate_dataset(&sys, &spec, &small_opts(4)).unwrap();
        let b = generate_dataset(&sys, &spec, &small_opts(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_matrix_rows_are_one_hot() {
        let e = MeasurementSpec::standard().selection_matrix(4);
        assert_eq!(e.shape(), &[4, 12]);
        let hot: Vec<usize> = (0..4)
            .map(|r| (0..12).find(|&c| e.get(r, c) == 1.0).unwrap())
            .collect();
        assert_eq!(hot, vec![8, 10, 11, 3]);
        assert_eq!(e.sum(), 4.0);
    }

    #[test]
    fn channel_names_roundtrip() {
        for c in Channel::all(4) {
            assert_eq!(c.to_string().parse::<Channel>().unwrap(), c);
        }
        assert!("acc_0".parse::<Channel>().is_err());
        assert!("strain_1".parse::<Channel>().is_err());
    }

    #[test]
    fn out_of_range_channel_rejected() {
        let spec = MeasurementSpec {
            channels: vec![Channel::new(Quantity::Displacement, 4)],
            noise_rms_fraction: 0.0,
        };
        assert!(spec.validate(4).is_err());
    }

    #[test]
    fn unperturbed_baseline_reproduces_linear_truth() {
        let sys = StructuralSystem::frame_4dof(0.0);
        let spec = MeasurementSpec {
            noise_rms_fraction: 0.0,
            ..MeasurementSpec::standard()
        };
        let ds = generate_dataset(&sys, &spec, &small_opts(2)).unwrap();
        let base = perturb_system(&sys, 0.0, 1).unwrap();
        for (r, m) in ds.truth.iter().zip(&ds.measured) {
            let p = fem_baseline_predict(&base, r, &spec, ds.manifest.substeps).unwrap();
            assert_eq!(p.measured, *m);
        }
    }

    #[test]
    fn perturbation_preserves_symmetry_and_sparsity() {
        let sys = StructuralSystem::frame_4dof(1.0);
        let p = perturb_system(&sys, 0.03, 9).unwrap();
        assert_eq!(p.cubic, 0.0);
        for (a, b) in [(&sys.stiffness, &p.stiffness), (&sys.mass, &p.mass)] {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(b.get(i, j), b.get(j, i));
                    assert_eq!(a.get(i, j) == 0.0, b.get(i, j) == 0.0);
                }
            }
        }
        assert_ne!(p.stiffness, sys.stiffness);
    }

    #[test]
    fn dataset_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sys = StructuralSystem::frame_4dof(0.5);
        let ds = generate_dataset(&sys, &MeasurementSpec::standard(), &small_opts(3)).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let hdr = fs::read_to_string(dir.path().join("real_0000.csv")).unwrap();
        assert!(hdr.starts_with("t,acc_1,acc_3,acc_4,disp_4\n"));
    }
}
