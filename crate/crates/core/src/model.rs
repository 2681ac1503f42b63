//! The Neural Modal ODE.
//!
//! * Encoder: an MLP maps the first sample `x₀` to `(μ, σ)` of the initial
//!   modal displacement `q₀`; a tanh RNN consumes `x₀ … x_{n_t}` and its final
//!   hidden state is mapped to `(μ, σ)` of the initial modal velocity `q̇₀`.
//! * Latent dynamics: `ż = [q̇; −Λq − Γq̇ + NN(z)]` with fixed `Λ`, `Γ`.
//! * Decoder: the fixed mode matrix, `x = Φ_p q`, `ẋ = Φ_p q̇`, `ẍ = Φ_p q̈`,
//!   followed by selection of the measured channels.
//!
//! Everything is built on a [`Graph`] with sequences stacked as rows, so the
//! same code serves training (parameters as differentiable leaves) and
//! prediction (parameters as constants).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ode::{rk4_trajectory, OdeSystem};
use crate::math::{Graph, RealArray, Var};
use crate::modal::ModalBasis;
use crate::params::ParameterStore;
use crate::simulator::{rng_for, streams, Channel, MeasurementSpec, Quantity, Response};

pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Retained modes `p`; the latent state has `2p` coordinates.
    pub modes: usize,
    /// Encoder window is `x₀ … x_{n_t}`.
    pub window: usize,
    pub mlp_width: usize,
    pub rnn_width: usize,
    pub residual_width: usize,
    /// Feed the RNN the window back to front.
    pub rnn_reverse: bool,
    /// RK4 steps per sample interval in the latent integration.
    pub substeps: usize,
    /// Initial per-channel emission log-variance.
    pub emission_logvar_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modes: 4,
            window: 10,
            mlp_width: 128,
            rnn_width: 32,
            residual_width: 128,
            rnn_reverse: false,
            substeps: 1,
            emission_logvar_init: 0.01f64.ln(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("model.modes", self.modes),
            ("model.window", self.window),
            ("model.mlp_width", self.mlp_width),
            ("model.rnn_width", self.rnn_width),
            ("model.residual_width", self.residual_width),
            ("model.substeps", self.substeps),
        ] {
            if v == 0 {
                return Err(Error::ConfigInvalid {
                    key: k.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if !self.emission_logvar_init.is_finite() {
            return Err(Error::ConfigInvalid {
                key: "model.emission_logvar_init".into(),
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }
}

/// Gaussian over `z₀ = [q₀; q̇₀]` with diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() || mu.len() % 2 != 0 {
            return Err(Error::Input(format!(
                "latent mean/std lengths {} and {} must match and be even",
                mu.len(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Input("latent standard deviations must be positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Reparameterized draw `z₀ = μ + σ ⊙ ε`; σ is floored at 1e-12.
pub fn sample_initial(g: &GaussianLatent, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::Input(format!(
            "noise length {} does not match latent dimension {}",
            noise.len(),
            g.dim()
        )));
    }
    Ok(g.mu
        .iter()
        .zip(&g.sigma)
        .zip(noise)
        .map(|((m, s), e)| m + s.max(SIGMA_FLOOR) * e)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub times: Vec<f64>,
    /// `(T+1) × 2p`
    pub z: RealArray,
    /// `(T+1) × p`
    pub qddot: RealArray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `None` when the caller supplied `z₀` directly.
    pub latent: Option<GaussianLatent>,
    pub trajectory: LatentTrajectory,
    /// `(T+1) × m` in measurement-channel order.
    pub observations: RealArray,
    pub response: Response,
}

/// Fixed structure of a model: dimensions, modal matrices and decoding maps.
#[derive(Clone, Debug)]
pub struct NeuralModalOde {
    pub config: ModelConfig,
    pub basis: ModalBasis,
    pub channels: Vec<Channel>,
    /// `[−Λ; −Γ]`, `2p × p`: the linear part of `q̈` as `z · lin`.
    lin: RealArray,
    /// `2p × m`: observations carried by `z = [q; q̇]`.
    obs_state: RealArray,
    /// `p × m`: observations carried by `q̈`.
    obs_accel: RealArray,
}

/// Graph handles for every parameter of a model.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
    residual_off: bool,
}

impl BoundParams {
    pub(crate) fn from_map(vars: BTreeMap<String, Var>) -> Self {
        Self {
            vars,
            residual_off: false,
        }
    }

    /// Drops `NN(z)` from the latent field; only sound when its output layer
    /// is zero or the residual is meant to be ignored.
    pub fn disable_residual(&mut self) {
        self.residual_off = true;
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub const EMISSION_LOGVAR: &str = "emission.logvar";
/// Encoder input standardization `(x + offset) ⊙ gain`; fitted once from
/// training data and never trained.
pub const INPUT_OFFSET: &str = "enc.input.offset";
pub const INPUT_GAIN: &str = "enc.input.gain";
const FROZEN: [&str; 2] = [INPUT_OFFSET, INPUT_GAIN];

impl NeuralModalOde {
    pub fn new(config: ModelConfig, basis: ModalBasis, spec: &MeasurementSpec) -> Result<Self> {
        config.validate()?;
        let p = basis.modes();
        if p != config.modes {
            return Err(Error::Input(format!(
                "basis has {p} modes but the model expects {}",
                config.modes
            )));
        }
        spec.validate(basis.dof())?;
        let m = spec.width();
        let mut lin = RealArray::zeros(&[2 * p, p]);
        for i in 0..p {
            lin.set(i, i, -basis.lambda.get(i, i));
            lin.set(p + i, i, -basis.gamma.get(i, i));
        }
        let mut obs_state = RealArray::zeros(&[2 * p, m]);
        let mut obs_accel = RealArray::zeros(&[p, m]);
        for (c, ch) in spec.channels.iter().enumerate() {
            for i in 0..p {
                let phi = basis.phi.get(ch.dof, i);
                match ch.quantity {
                    Quantity::Displacement => obs_state.set(i, c, phi),
                    Quantity::Velocity => obs_state.set(p + i, c, phi),
                    Quantity::Acceleration => obs_accel.set(i, c, phi),
                }
            }
        }
        Ok(Self {
            config,
            basis,
            channels: spec.channels.clone(),
            lin,
            obs_state,
            obs_accel,
        })
    }

    pub fn modes(&self) -> usize {
        self.config.modes
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.config.modes
    }

    pub fn obs_dim(&self) -> usize {
        self.channels.len()
    }

    /// `(name, shape)` of every trainable entry, encoder first.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (m, p) = (self.obs_dim(), self.modes());
        let c = &self.config;
        let (h, r, n) = (c.mlp_width, c.rnn_width, c.residual_width);
        [
            (INPUT_OFFSET, vec![m]),
            (INPUT_GAIN, vec![m]),
            ("enc.mlp.w1", vec![m, h]),
            ("enc.mlp.b1", vec![h]),
            ("enc.mlp.w2", vec![h, h]),
            ("enc.mlp.b2", vec![h]),
            ("enc.mlp.w3", vec![h, 2 * p]),
            ("enc.mlp.b3", vec![2 * p]),
            ("enc.rnn.wx", vec![m, r]),
            ("enc.rnn.wh", vec![r, r]),
            ("enc.rnn.b", vec![r]),
            ("enc.rnn.wo", vec![r, 2 * p]),
            ("enc.rnn.bo", vec![2 * p]),
            ("dyn.w1", vec![2 * p, n]),
            ("dyn.b1", vec![n]),
            ("dyn.w2", vec![n, n]),
            ("dyn.b2", vec![n]),
            ("dyn.w3", vec![n, p]),
            ("dyn.b3", vec![p]),
            (EMISSION_LOGVAR, vec![m]),
        ]
        .into_iter()
        .map(|(k, s)| (k.to_string(), s))
        .collect()
    }

    /// Uniform `±1/√fan_in` weights and biases; the residual output layer
    /// starts at zero so the untrained field is the pure modal model.
    pub fn init_parameters(&self, seed: u64) -> ParameterStore {
        let mut rng = rng_for(seed, streams::MODEL_INIT);
        let mut store = ParameterStore::new();
        let mut fan_in = 1;
        for (name, shape) in self.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if name == EMISSION_LOGVAR {
                vec![self.config.emission_logvar_init; n]
            } else if name == INPUT_OFFSET {
                vec![0.0; n]
            } else if name == INPUT_GAIN {
                vec![1.0; n]
            } else if name == "dyn.w3" || name == "dyn.b3" {
                vec![0.0; n]
            } else {
                if shape.len() == 2 {
                    fan_in = shape[0];
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            store
                .insert(name, RealArray::new(shape, data).expect("shape from spec"))
                .expect("names are unique");
        }
        store
    }

    /// Sets the encoder input standardization to the per-channel mean and
    /// standard deviation over all samples of `sequences`.
    pub fn fit_input_normalization(&self, params: &mut ParameterStore, sequences: &[&RealArray]) -> Result<()> {
        let m = self.obs_dim();
        let (mut sum, mut n) = (vec![0.0; m], 0usize);
        for s in sequences {
            if s.cols() != m {
                return Err(Error::dim("input normalization", &[m], &[s.cols()]));
            }
            for r in 0..s.rows() {
                for (c, v) in s.row(r).iter().enumerate() {
                    sum[c] += v;
                }
            }
            n += s.rows();
        }
        if n < 2 {
            return Err(Error::Input("too few samples to fit input normalization".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; m];
        for s in sequences {
            for r in 0..s.rows() {
                for (c, v) in s.row(r).iter().enumerate() {
                    sq[c] += (v - mean[c]).powi(2);
                }
            }
        }
        let gain: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| {
                // Treat spread at rounding level as a constant channel.
                let var = q / n as f64;
                if var.sqrt() > 1e-12 * mu.abs().max(1e-300) {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let offset: Vec<f64> = mean.iter().map(|v| -v).collect();
        *params
            .get_mut(INPUT_OFFSET)
            .ok_or_else(|| Error::Compatibility(format!("missing entry `{INPUT_OFFSET}`")))? = RealArray::vector(offset);
        *params
            .get_mut(INPUT_GAIN)
            .ok_or_else(|| Error::Compatibility(format!("missing entry `{INPUT_GAIN}`")))? = RealArray::vector(gain);
        Ok(())
    }

    /// Parameters as graph leaves; differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph, params: &ParameterStore, trainable: bool) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, shape) in self.parameter_shapes() {
            let v = params
                .get(&name)
                .ok_or_else(|| Error::Compatibility(format!("missing entry `{name}`")))?;
            if v.shape() != shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "entry `{name}` has shape {:?}, model expects {shape:?}",
                    v.shape()
                )));
            }
            let var = if trainable && !FROZEN.contains(&name.as_str()) {
                g.param(name.clone(), v.clone())
            } else {
                g.constant(v.clone())
            };
            vars.insert(name, var);
        }
        Ok(BoundParams::from_map(vars))
    }

    /// Returns `(μ, σ)` of `z₀`, each `B × 2p`. `window[k]` is the `B × m`
    /// batch of samples `x_k`.
    pub fn encode(&self, g: &mut Graph, bp: &BoundParams, window: &[Var]) -> Result<(Var, Var)> {
        let p = self.modes();
        if window.len() < self.config.window + 1 {
            return Err(Error::Input(format!(
                "encoder window has {} samples, needs {}",
                window.len(),
                self.config.window + 1
            )));
        }
        let (offset, gain) = (bp.get(INPUT_OFFSET), bp.get(INPUT_GAIN));
        let window = window[..self.config.window + 1]
            .iter()
            .map(|x| {
                let shifted = g.add_row(*x, offset)?;
                g.mul_row(shifted, gain)
            })
            .collect::<Result<Vec<_>>>()?;

        let h1 = g.affine(window[0], bp.get("enc.mlp.w1"), bp.get("enc.mlp.b1"))?;
        let h1 = g.tanh(h1)?;
        let h2 = g.affine(h1, bp.get("enc.mlp.w2"), bp.get("enc.mlp.b2"))?;
        let h2 = g.tanh(h2)?;
        let disp = g.affine(h2, bp.get("enc.mlp.w3"), bp.get("enc.mlp.b3"))?;

        let order: Vec<Var> = if self.config.rnn_reverse {
            window.iter().rev().copied().collect()
        } else {
            window.to_vec()
        };
        let mut hidden: Option<Var> = None;
        for x in order {
            let mut pre = g.affine(x, bp.get("enc.rnn.wx"), bp.get("enc.rnn.b"))?;
            if let Some(h) = hidden {
                let rec = g.matmul(h, bp.get("enc.rnn.wh"))?;
                pre = g.add(pre, rec)?;
            }
            hidden = Some(g.tanh(pre)?);
        }
        let vel = g.affine(
            hidden.expect("window is non-empty"),
            bp.get("enc.rnn.wo"),
            bp.get("enc.rnn.bo"),
        )?;

        let mu_q = g.slice_cols(disp, 0, p)?;
        let pre_q = g.slice_cols(disp, p, 2 * p)?;
        let mu_v = g.slice_cols(vel, 0, p)?;
        let pre_v = g.slice_cols(vel, p, 2 * p)?;
        let mu = g.concat(&[mu_q, mu_v])?;
        let pre = g.concat(&[pre_q, pre_v])?;
        let sigma = g.softplus(pre)?;
        let sigma = g.clamp_min(sigma, SIGMA_FLOOR)?;
        Ok((mu, sigma))
    }

    /// `z₀ = μ + σ ⊙ ε`
    pub fn sample(&self, g: &mut Graph, mu: Var, sigma: Var, eps: Var) -> Result<Var> {
        let spread = g.mul(sigma, eps)?;
        g.add(mu, spread)
    }

    /// `NN(z)`, `B × p`.
    pub fn residual(&self, g: &mut Graph, bp: &BoundParams, z: Var) -> Result<Var> {
        let h = g.affine(z, bp.get("dyn.w1"), bp.get("dyn.b1"))?;
        let h = g.tanh(h)?;
        let h = g.affine(h, bp.get("dyn.w2"), bp.get("dyn.b2"))?;
        let h = g.tanh(h)?;
        g.affine(h, bp.get("dyn.w3"), bp.get("dyn.b3"))
    }

    /// `ż = [q̇; −Λq − Γq̇ + NN(z)]`, `B × 2p`.
    pub fn latent_field(&self, g: &mut Graph, bp: &BoundParams, lin: Var, z: Var) -> Result<Var> {
        let p = self.modes();
        let upper = g.slice_cols(z, p, 2 * p)?;
        let linear = g.matmul(z, lin)?;
        let lower = if bp.residual_off {
            linear
        } else {
            let nn = self.residual(g, bp, z)?;
            g.add(linear, nn)?
        };
        g.concat(&[upper, lower])
    }

    pub fn linear_operator(&self, g: &mut Graph) -> Var {
        g.constant(self.lin.clone())
    }

    /// Latent states and their time derivatives at every instant.
    pub fn integrate(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        z0: Var,
        times: &[f64],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let lin = self.linear_operator(g);
        let mut ode = GraphOde {
            graph: g,
            model: self,
            params: bp,
            lin,
        };
        let tr = rk4_trajectory(&mut ode, z0, times[0], times, self.config.substeps, true)?;
        Ok((tr.states, tr.derivatives))
    }

    /// Predicted measured channels at one instant, `B × m`.
    pub fn observe(&self, g: &mut Graph, obs: &ObservationOps, z: Var, zdot: Var) -> Result<Var> {
        let p = self.modes();
        let qdd = g.slice_cols(zdot, p, 2 * p)?;
        let a = g.matmul(z, obs.state)?;
        let b = g.matmul(qdd, obs.accel)?;
        g.add(a, b)
    }

    pub fn observation_ops(&self, g: &mut Graph) -> ObservationOps {
        ObservationOps {
            state: g.constant(self.obs_state.clone()),
            accel: g.constant(self.obs_accel.clone()),
        }
    }

    /// Window rows `0..=n_t` of each sequence, stacked per time as `B × m`.
    pub fn window_inputs(&self, g: &mut Graph, windows: &[&RealArray]) -> Result<Vec<Var>> {
        let m = self.obs_dim();
        let need = self.config.window + 1;
        for w in windows {
            if w.cols() != m {
                return Err(Error::dim("encoder window", &[need, m], w.shape()));
            }
            if w.rows() < need {
                return Err(Error::Input(format!(
                    "encoder window has {} samples, needs {need}",
                    w.rows()
                )));
            }
        }
        (0..need)
            .map(|k| {
                let mut data = Vec::with_capacity(windows.len() * m);
                for w in windows {
                    data.extend_from_slice(w.row(k));
                }
                Ok(g.constant(RealArray::matrix(windows.len(), m, data)?))
            })
            .collect()
    }

    /// Encodes a single `(n_t+1) × m` window.
    pub fn encode_initial(&self, params: &ParameterStore, window: &RealArray) -> Result<GaussianLatent> {
        let mut g = Graph::new();
        let bp = self.bind(&mut g, params, false)?;
        let xs = self.window_inputs(&mut g, &[window])?;
        let (mu, sigma) = self.encode(&mut g, &bp, &xs)?;
        GaussianLatent::new(g.value(mu).data().to_vec(), g.value(sigma).data().to_vec())
    }

    /// `ż` at a single latent state.
    pub fn latent_vector_field(&self, params: &ParameterStore, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::dim("latent field", &[self.latent_dim()], &[z.len()]));
        }
        let mut g = Graph::new();
        let bp = self.bind(&mut g, params, false)?;
        let lin = self.linear_operator(&mut g);
        let zv = g.constant(RealArray::matrix(1, z.len(), z.to_vec())?);
        let out = self.latent_field(&mut g, &bp, lin, zv)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn integrate_latent(&self, params: &ParameterStore, z0: &[f64], times: &[f64]) -> Result<LatentTrajectory> {
        Ok(self.integrate_latent_batch(params, &[z0.to_vec()], times)?.remove(0))
    }

    pub fn integrate_latent_batch(
        &self,
        params: &ParameterStore,
        z0s: &[Vec<f64>],
        times: &[f64],
    ) -> Result<Vec<LatentTrajectory>> {
        let d = self.latent_dim();
        let p = self.modes();
        let b = z0s.len();
        if let Some(z) = z0s.iter().find(|z| z.len() != d) {
            return Err(Error::dim("initial latent state", &[d], &[z.len()]));
        }
        let mut g = Graph::new();
        let bp = self.bind(&mut g, params, false)?;
        let z0 = g.constant(RealArray::matrix(b, d, z0s.concat())?);
        let (zs, dz) = self.integrate(&mut g, &bp, z0, times)?;
        Ok((0..b)
            .map(|row| {
                let n = times.len();
                let mut z = Vec::with_capacity(n * d);
                let mut qdd = Vec::with_capacity(n * p);
                for (zv, dv) in zs.iter().zip(&dz) {
                    z.extend_from_slice(g.value(*zv).row(row));
                    qdd.extend_from_slice(&g.value(*dv).row(row)[p..]);
                }
                LatentTrajectory {
                    times: times.to_vec(),
                    z: RealArray::matrix(n, d, z).expect("consistent"),
                    qddot: RealArray::matrix(n, p, qdd).expect("consistent"),
                }
            })
            .collect())
    }

    /// Predictions for a batch of windows. `noise` holds one `2p` draw per
    /// window; `None` means deterministic (`z₀ = μ`).
    pub fn predict_batch(
        &self,
        params: &ParameterStore,
        windows: &[&RealArray],
        times: &[f64],
        noise: Option<&[Vec<f64>]>,
    ) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let bp = self.bind(&mut g, params, false)?;
        let xs = self.window_inputs(&mut g, windows)?;
        let (mu, sigma) = self.encode(&mut g, &bp, &xs)?;
        let latents: Vec<GaussianLatent> = (0..windows.len())
            .map(|r| GaussianLatent::new(g.value(mu).row(r).to_vec(), g.value(sigma).row(r).to_vec()))
            .collect::<Result<_>>()?;
        let z0s: Vec<Vec<f64>> = match noise {
            None => latents.iter().map(|l| l.mu.clone()).collect(),
            Some(eps) => {
                if eps.len() != windows.len() {
                    return Err(Error::Input("one noise draw per window is required".into()));
                }
                latents
                    .iter()
                    .zip(eps)
                    .map(|(l, e)| sample_initial(l, e))
                    .collect::<Result<_>>()?
            }
        };
        drop(g);
        let trajs = self.integrate_latent_batch(params, &z0s, times)?;
        trajs
            .into_iter()
            .zip(latents)
            .map(|(t, l)| {
                let (observations, response) = self.decode_and_select(&t)?;
                Ok(Prediction {
                    latent: Some(l),
                    trajectory: t,
                    observations,
                    response,
                })
            })
            .collect()
    }

    /// Encoder → sample (zero noise when `noise` is `None`) → integrate →
    /// decode.
    pub fn predict_sequence(
        &self,
        params: &ParameterStore,
        window: &RealArray,
        times: &[f64],
        noise: Option<&[f64]>,
    ) -> Result<Prediction> {
        let eps = noise.map(|e| vec![e.to_vec()]);
        Ok(self
            .predict_batch(params, &[window], times, eps.as_deref())?
            .remove(0))
    }

    /// Generative use with a caller-chosen `z₀`, bypassing the encoder.
    pub fn predict_from_initial(&self, params: &ParameterStore, z0: &[f64], times: &[f64]) -> Result<Prediction> {
        let traj = self.integrate_latent(params, z0, times)?;
        let (observations, response) = self.decode_and_select(&traj)?;
        Ok(Prediction {
            latent: None,
            trajectory: traj,
            observations,
            response,
        })
    }

    /// Full-field response and the measured-channel prediction `E·[x; ẋ; ẍ]`.
    pub fn decode_and_select(&self, traj: &LatentTrajectory) -> Result<(RealArray, Response)> {
        decode_and_select(traj, &self.basis, &self.channels)
    }
}

pub fn decode_and_select(
    traj: &LatentTrajectory,
    basis: &ModalBasis,
    channels: &[Channel],
) -> Result<(RealArray, Response)> {
    let p = basis.modes();
    if traj.z.cols() != 2 * p || traj.qddot.cols() != p {
        return Err(Error::dim("decode", &[2 * p], traj.z.shape()));
    }
    let phi_t = basis.phi.transpose();
    let response = Response {
        disp: traj.z.slice_cols(0, p)?.matmul(&phi_t)?,
        vel: traj.z.slice_cols(p, 2 * p)?.matmul(&phi_t)?,
        acc: traj.qddot.matmul(&phi_t)?,
    };
    let obs = response.select(channels)?;
    Ok((obs, response))
}

#[derive(Clone, Copy, Debug)]
pub struct ObservationOps {
    state: Var,
    accel: Var,
}

struct GraphOde<'a> {
    graph: &'a mut Graph,
    model: &'a NeuralModalOde,
    params: &'a BoundParams,
    lin: Var,
}

impl OdeSystem for GraphOde<'_> {
    type State = Var;

    fn derivative(&mut self, _t: f64, z: &Var) -> Result<Var> {
        self.model.latent_field(self.graph, self.params, self.lin, *z)
    }

    fn combine(&mut self, base: &Var, terms: &[(f64, &Var)]) -> Result<Var> {
        let mut all = Vec::with_capacity(terms.len() + 1);
        all.push((1.0, *base));
        all.extend(terms.iter().map(|(c, v)| (*c, **v)));
        self.graph.lincomb(&all)
    }

    fn is_finite(&self, z: &Var) -> bool {
        self.graph.value(*z).all_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal::{build_modal_basis, StructuralSystem};
    use crate::math::uniform_times;

    fn one_mode_basis(omega: f64, xi: f64) -> ModalBasis {
        ModalBasis {
            omegas: vec![omega],
            xis: vec![xi],
            phi: RealArray::identity(1),
            lambda: RealArray::diag(&[omega * omega]),
            gamma: RealArray::diag(&[2.0 * xi * omega]),
        }
    }

    fn disp_spec(g: usize) -> MeasurementSpec {
        MeasurementSpec {
            channels: (0..g).map(|d| Channel::new(Quantity::Displacement, d)).collect(),
            noise_rms_fraction: 0.0,
        }
    }

    fn small_config(p: usize) -> ModelConfig {
        ModelConfig {
            modes: p,
            window: 3,
            mlp_width: 6,
            rnn_width: 5,
            residual_width: 7,
            ..ModelConfig::default()
        }
    }

    fn zeroed(store: &ParameterStore) -> ParameterStore {
        let mut out = store.clone();
        for name in store.names() {
            if name != EMISSION_LOGVAR {
                let z = RealArray::zeros(store.get(name).unwrap().shape());
                *out.get_mut(name).unwrap() = z;
            }
        }
        out
    }

    #[test]
    fn input_normalization_standardizes_channels() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 2).unwrap();
        let model = NeuralModalOde::new(small_config(2), basis, &MeasurementSpec::standard()).unwrap();
        let mut params = model.init_parameters(1);
        let a = RealArray::new(vec![3, 4], vec![1.0, 10.0, 0.0, 5.0, 3.0, 30.0, 0.0, 5.0, 5.0, 20.0, 0.0, 5.0]).unwrap();
        model.fit_input_normalization(&mut params, &[&a]).unwrap();
        let off = params.get(INPUT_OFFSET).unwrap().data().to_vec();
        let gain = params.get(INPUT_GAIN).unwrap().data().to_vec();
        assert_eq!(off, vec![-3.0, -20.0, 0.0, -5.0]);
        let sd = (8.0f64 / 3.0).sqrt();
        assert!((gain[0] - 1.0 / sd).abs() < 1e-12);
        assert!((gain[1] - 1.0 / (5.0 * sd)).abs() < 1e-12);
        // Constant channels keep unit gain.
        assert_eq!(gain[2], 1.0);
        assert_eq!(gain[3], 1.0);
    }

    #[test]
    fn input_statistics_are_not_trainable() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 2).unwrap();
        let model = NeuralModalOde::new(small_config(2), basis, &MeasurementSpec::standard()).unwrap();
        let params = model.init_parameters(1);
        let mut g = Graph::new();
        let bp = model.bind(&mut g, &params, true).unwrap();
        let xs = model.window_inputs(&mut g, &[&RealArray::filled(&[4, 4], 0.5)]).unwrap();
        let (mu, _) = model.encode(&mut g, &bp, &xs).unwrap();
        let s = g.sum(mu).unwrap();
        let grads = g.backward(s).unwrap().into_named();
        assert!(!grads.contains_key(INPUT_OFFSET) && !grads.contains_key(INPUT_GAIN));
        assert!(grads.contains_key("enc.mlp.w1"));
    }

    #[test]
    fn zero_network_encodes_to_log_two() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 4).unwrap();
        let model = NeuralModalOde::new(ModelConfig::default(), basis, &MeasurementSpec::standard()).unwrap();
        let params = zeroed(&model.init_parameters(1));
        let window = RealArray::filled(&[11, 4], 0.3);
        let lat = model.encode_initial(&params, &window).unwrap();
        assert_eq!(lat.mu, vec![0.0; 8]);
        for s in lat.sigma {
            assert!((s - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn default_configuration_latent_is_eight_dimensional() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 4).unwrap();
        let model = NeuralModalOde::new(ModelConfig::default(), basis, &MeasurementSpec::standard()).unwrap();
        let params = model.init_parameters(3);
        let window = RealArray::new(vec![11, 4], (0..44).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let lat = model.encode_initial(&params, &window).unwrap();
        assert_eq!((lat.mu.len(), lat.sigma.len()), (8, 8));
    }

    #[test]
    fn displacement_half_depends_only_on_first_sample() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 2).unwrap();
        let model = NeuralModalOde::new(small_config(2), basis, &MeasurementSpec::standard()).unwrap();
        let params = model.init_parameters(5);
        let data: Vec<f64> = (0..16).map(|i| (i as f64 * 0.71).cos()).collect();
        let w = RealArray::matrix(4, 4, data.clone()).unwrap();
        let mut swapped = data.clone();
        for c in 0..4 {
            swapped.swap(4 + c, 12 + c);
        }
        let w2 = RealArray::matrix(4, 4, swapped).unwrap();
        let a = model.encode_initial(&params, &w).unwrap();
        let b = model.encode_initial(&params, &w2).unwrap();
        assert_eq!(a.mu[..2], b.mu[..2]);
        assert_eq!(a.sigma[..2], b.sigma[..2]);
        assert_ne!(a.mu[2..], b.mu[2..]);
    }

    #[test]
    fn short_window_rejected() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 2).unwrap();
        let model = NeuralModalOde::new(small_config(2), basis, &MeasurementSpec::standard()).unwrap();
        let params = model.init_parameters(5);
        let w = RealArray::zeros(&[3, 4]);
        assert!(matches!(model.encode_initial(&params, &w), Err(Error::Input(_))));
    }

    #[test]
    fn sampling_edge_cases() {
        let g = GaussianLatent::new(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        assert_eq!(sample_initial(&g, &[0.0, 0.0]).unwrap(), g.mu);
        assert_eq!(sample_initial(&g, &[1.0, 1.0]).unwrap(), vec![1.5, 0.0]);
        assert!(sample_initial(&g, &[0.0]).is_err());
        let tiny = GaussianLatent {
            mu: vec![3.0, 4.0],
            sigma: vec![0.0, 0.0],
        };
        let z = sample_initial(&tiny, &[1.0, -1.0]).unwrap();
        assert_eq!(z, vec![3.0 + SIGMA_FLOOR, 4.0 - SIGMA_FLOOR]);
    }

    #[test]
    fn pure_modal_field_single_mode() {
        let model = NeuralModalOde::new(small_config(1), one_mode_basis(2.0, 0.1), &disp_spec(1)).unwrap();
        let params = zeroed(&model.init_parameters(0));
        assert_eq!(model.latent_vector_field(&params, &[1.0, 0.0]).unwrap(), vec![0.0, -4.0]);
        assert_eq!(model.latent_vector_field(&params, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_residual_shifts_lower_block() {
        let model = NeuralModalOde::new(small_config(1), one_mode_basis(2.0, 0.1), &disp_spec(1)).unwrap();
        let mut params = zeroed(&model.init_parameters(0));
        *params.get_mut("dyn.b3").unwrap() = RealArray::vector(vec![0.75]);
        let z = [0.3, -0.2];
        let f = model.latent_vector_field(&params, &z).unwrap();
        assert_eq!(f[0], -0.2);
        assert!((f[1] - (-4.0 * 0.3 - 0.4 * -0.2 + 0.75)).abs() < 1e-15);
    }

    #[test]
    fn undamped_single_mode_period() {
        let omega = 2.0;
        let model = NeuralModalOde::new(small_config(1), one_mode_basis(omega, 0.0), &disp_spec(1)).unwrap();
        let params = zeroed(&model.init_parameters(0));
        let period = 2.0 * std::f64::consts::PI / omega;
        let dt = 0.01 / omega;
        let steps = (period / dt).round() as usize;
        let times = uniform_times(0.0, period / steps as f64, steps);
        let tr = model.integrate_latent(&params, &[1.0, 0.0], &times).unwrap();
        let last = tr.z.row(steps);
        assert!((last[0] - 1.0).abs() < 1e-5 && last[1].abs() < 1e-5, "{last:?}");
    }

    #[test]
    fn qddot_matches_field_at_every_instant() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 2).unwrap();
        let model = NeuralModalOde::new(small_config(2), basis, &MeasurementSpec::standard()).unwrap();
        let mut params = model.init_parameters(11);
        let w3 = RealArray::filled(&[7, 2], 0.05);
        *params.get_mut("dyn.w3").unwrap() = w3;
        let times = uniform_times(0.0, 0.05, 40);
        let tr = model.integrate_latent(&params, &[0.5, -0.3, 0.2, 0.1], &times).unwrap();
        for t in 0..times.len() {
            let f = model.latent_vector_field(&params, tr.z.row(t)).unwrap();
            for i in 0..2 {
                assert!((f[2 + i] - tr.qddot.get(t, i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identity_decoder_returns_modal_displacement() {
        let basis = ModalBasis {
            omegas: vec![1.0, 2.0],
            xis: vec![0.0, 0.0],
            phi: RealArray::identity(2),
            lambda: RealArray::diag(&[1.0, 4.0]),
            gamma: RealArray::zeros(&[2, 2]),
        };
        let traj = LatentTrajectory {
            times: vec![0.0, 1.0],
            z: RealArray::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap(),
            qddot: RealArray::zeros(&[2, 2]),
        };
        let (obs, _) = decode_and_select(&traj, &basis, &disp_spec(2).channels).unwrap();
        assert_eq!(obs.data(), &[1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn unit_modal_coordinate_decodes_to_mode_shape() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 4).unwrap();
        let traj = LatentTrajectory {
            times: vec![0.0],
            z: RealArray::matrix(1, 8, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            qddot: RealArray::zeros(&[1, 4]),
        };
        let (_, resp) = decode_and_select(&traj, &basis, &disp_spec(4).channels).unwrap();
        assert_eq!(resp.disp.row(0).to_vec(), basis.phi.column(0));
    }

    #[test]
    fn default_channels_select_from_stacked_vector() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 4).unwrap();
        let spec = MeasurementSpec::standard();
        let z: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let qdd = vec![0.2, -0.1, 0.05, 0.3];
        let traj = LatentTrajectory {
            times: vec![0.0],
            z: RealArray::matrix(1, 8, z.clone()).unwrap(),
            qddot: RealArray::matrix(1, 4, qdd.clone()).unwrap(),
        };
        let (obs, resp) = decode_and_select(&traj, &basis, &spec.channels).unwrap();
        assert_eq!(obs.shape(), &[1, 4]);
        let mut stacked = resp.disp.row(0).to_vec();
        stacked.extend_from_slice(resp.vel.row(0));
        stacked.extend_from_slice(resp.acc.row(0));
        let e = spec.selection_matrix(4);
        let want = e.matvec(&RealArray::vector(stacked)).unwrap();
        assert_eq!(obs.row(0), want.data());
    }

    #[test]
    fn decoder_rejects_dof_beyond_basis() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 4).unwrap();
        let spec = MeasurementSpec {
            channels: vec![Channel::new(Quantity::Acceleration, 4)],
            noise_rms_fraction: 0.0,
        };
        assert!(NeuralModalOde::new(ModelConfig::default(), basis, &spec).is_err());
    }

    #[test]
    fn zero_initial_state_gives_zero_prediction() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 2).unwrap();
        let model = NeuralModalOde::new(small_config(2), basis, &MeasurementSpec::standard()).unwrap();
        let mut params = model.init_parameters(2);
        *params.get_mut("dyn.w3").unwrap() = RealArray::filled(&[7, 2], 0.1);
        for b in ["dyn.b1", "dyn.b2", "dyn.b3"] {
            let s = params.get(b).unwrap().shape().to_vec();
            *params.get_mut(b).unwrap() = RealArray::zeros(&s);
        }
        let times = uniform_times(0.0, 0.05, 20);
        let pred = model.predict_from_initial(&params, &[0.0; 4], &times).unwrap();
        assert!(pred.observations.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_prediction_is_bitwise_stable() {
        let basis = build_modal_basis(&StructuralSystem::frame_4dof(0.0), 2).unwrap();
        let model = NeuralModalOde::new(small_config(2), basis, &MeasurementSpec::standard()).unwrap();
        let params = model.init_parameters(4);
        let w = RealArray::new(vec![4, 4], (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        let times = uniform_times(0.0, 0.05, 30);
        let a = model.predict_sequence(&params, &w, &times, None).unwrap();
        let b = model.predict_sequence(&params, &w, &times, None).unwrap();
        assert_eq!(a, b);
        let mu = &a.latent.as_ref().unwrap().mu;
        assert_eq!(a.trajectory.z.row(0), mu.as_slice());
    }
}
