//! Three-way gradient comparison for a terminal loss `L = ‖z(T)‖²` on a latent
//! field of the form `ż = A z + r(z, θ)`:
//!
//! * backpropagation through the unrolled RK4 steps;
//! * the continuous adjoint, integrating `ȧ = −Aᵀa − (∂r/∂z)ᵀa` and
//!   `ȧ_θ = −(∂r/∂θ)ᵀa` backward from `a(T) = ∂L/∂z(T)`;
//! * central finite differences of the unrolled forward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math::ode::{rk4_integrate, FnSystem, OdeSystem};
use crate::math::{Graph, RealArray, Var};
use crate::model::{BoundParams, NeuralModalOde};
use crate::params::ParameterStore;

pub trait AdjointField {
    fn dim(&self) -> usize;

    /// `A`, `d × d`.
    fn linear(&self) -> RealArray;

    /// Differentiable parameters `θ` of the residual part.
    fn parameters(&self) -> Vec<(String, RealArray)>;

    /// `r(z, θ)` for a `1 × d` row `z`; `None` for a purely linear field.
    fn residual(&self, g: &mut Graph, z: Var, theta: &BTreeMap<String, Var>) -> Result<Option<Var>>;
}

/// `ż = A z`.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub a: RealArray,
}

impl AdjointField for LinearField {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn linear(&self) -> RealArray {
        self.a.clone()
    }

    fn parameters(&self) -> Vec<(String, RealArray)> {
        Vec::new()
    }

    fn residual(&self, _: &mut Graph, _: Var, _: &BTreeMap<String, Var>) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// The latent field of a model: `A = [0 I; −Λ −Γ]`, `r = [0; NN(z)]`,
/// with `θ` the residual-network weights.
pub struct ModalResidualField<'a> {
    pub model: &'a NeuralModalOde,
    pub params: &'a ParameterStore,
}

impl AdjointField for ModalResidualField<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn linear(&self) -> RealArray {
        let p = self.model.modes();
        let mut a = RealArray::zeros(&[2 * p, 2 * p]);
        let lambda = self.model.basis.lambda_diag();
        let gamma = self.model.basis.gamma_diag();
        for i in 0..p {
            a.set(i, p + i, 1.0);
            a.set(p + i, i, -lambda[i]);
            a.set(p + i, p + i, -gamma[i]);
        }
        a
    }

    fn parameters(&self) -> Vec<(String, RealArray)> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with("dyn."))
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    fn residual(&self, g: &mut Graph, z: Var, theta: &BTreeMap<String, Var>) -> Result<Option<Var>> {
        let bp = BoundParams::from_map(theta.clone());
        let nn = self.model.residual(g, &bp, z)?;
        let zeros = g.constant(RealArray::zeros(&[1, self.model.modes()]));
        Ok(Some(g.concat(&[zeros, nn])?))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdjointOptions {
    /// RK4 steps per output interval for the unrolled and finite-difference paths.
    pub substeps: usize,
    /// RK4 steps per output interval for the adjoint sweep.
    pub adjoint_substeps: usize,
    /// Relative central-difference step.
    pub fd_step: f64,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self {
            substeps: 10,
            adjoint_substeps: 20,
            fd_step: 1e-6,
        }
    }
}

/// Gradients are flattened as `[∂L/∂z₀; ∂L/∂θ]`, with `θ` entries in
/// parameter order. Relative errors are `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`.
#[derive(Clone, Debug)]
pub struct AdjointReport {
    pub loss: f64,
    pub backprop: Vec<f64>,
    pub adjoint: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub backprop_vs_adjoint: f64,
    pub backprop_vs_fd: f64,
    pub adjoint_vs_fd: f64,
}

impl AdjointReport {
    pub fn max_relative_error(&self) -> f64 {
        self.backprop_vs_adjoint.max(self.backprop_vs_fd).max(self.adjoint_vs_fd)
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

struct GraphField<'a, F: AdjointField + ?Sized> {
    g: &'a mut Graph,
    field: &'a F,
    a_t: Var,
    theta: &'a BTreeMap<String, Var>,
}

fn field_on_graph<F: AdjointField + ?Sized>(
    g: &mut Graph,
    field: &F,
    a_t: Var,
    theta: &BTreeMap<String, Var>,
    z: Var,
) -> Result<Var> {
    let lin = g.matmul(z, a_t)?;
    match field.residual(g, z, theta)? {
        Some(r) => g.add(lin, r),
        None => Ok(lin),
    }
}

impl<F: AdjointField + ?Sized> OdeSystem for GraphField<'_, F> {
    type State = Var;

    fn derivative(&mut self, _t: f64, z: &Var) -> Result<Var> {
        field_on_graph(self.g, self.field, self.a_t, self.theta, *z)
    }

    fn combine(&mut self, base: &Var, terms: &[(f64, &Var)]) -> Result<Var> {
        let mut all = vec![(1.0, *base)];
        all.extend(terms.iter().map(|(c, v)| (*c, **v)));
        self.g.lincomb(&all)
    }

    fn is_finite(&self, z: &Var) -> bool {
        self.g.value(*z).all_finite()
    }
}

/// Loss and, optionally, `[∂L/∂z₀; ∂L/∂θ]` by reverse mode through RK4.
fn unrolled<F: AdjointField + ?Sized>(
    field: &F,
    theta: &[(String, RealArray)],
    z0: &[f64],
    times: &[f64],
    substeps: usize,
    grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let d = field.dim();
    let mut g = Graph::new();
    let z0v = g.param("z0", RealArray::matrix(1, d, z0.to_vec())?);
    let mut vars = BTreeMap::new();
    for (k, v) in theta {
        vars.insert(k.clone(), g.param(k.clone(), v.clone()));
    }
    let a_t = g.constant(field.linear().transpose());
    let mut sys = GraphField {
        g: &mut g,
        field,
        a_t,
        theta: &vars,
    };
    let states = rk4_integrate(&mut sys, z0v, times[0], times, substeps)?;
    let last = *states.last().expect("non-empty times");
    let sq = g.square(last)?;
    let loss = g.sum(sq)?;
    let value = g.scalar(loss);
    if !grad {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    let mut out = grads.get(z0v).expect("leaf").into_data();
    for (k, _) in theta {
        out.extend(grads.get(vars[k]).expect("leaf").into_data());
    }
    Ok((value, out))
}

/// `(f(z), Aᵀa + (∂r/∂z)ᵀa, (∂r/∂θ)ᵀa)`
fn field_and_vjp<F: AdjointField + ?Sized>(
    field: &F,
    a_mat: &RealArray,
    theta: &[(String, RealArray)],
    z: &[f64],
    adj: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = field.dim();
    let mut g = Graph::new();
    let zv = g.param("z", RealArray::matrix(1, d, z.to_vec())?);
    let mut vars = BTreeMap::new();
    for (k, v) in theta {
        vars.insert(k.clone(), g.param(k.clone(), v.clone()));
    }
    let zcol = RealArray::vector(z.to_vec());
    let acol = RealArray::vector(adj.to_vec());
    let mut f = a_mat.matvec(&zcol)?.into_data();
    let mut az = a_mat.transpose().matvec(&acol)?.into_data();
    let n_theta: usize = theta.iter().map(|(_, v)| v.len()).sum();
    let mut ath = vec![0.0; n_theta];
    if let Some(r) = field.residual(&mut g, zv, &vars)? {
        for (fi, ri) in f.iter_mut().zip(g.value(r).data()) {
            *fi += ri;
        }
        let weights = g.constant(RealArray::matrix(1, d, adj.to_vec())?);
        let prod = g.mul(r, weights)?;
        let s = g.sum(prod)?;
        let grads = g.backward(s)?;
        for (o, v) in az.iter_mut().zip(grads.get(zv).expect("leaf").data()) {
            *o += v;
        }
        let mut off = 0;
        for (k, v) in theta {
            let gk = grads.get(vars[k]).expect("leaf");
            ath[off..off + v.len()].copy_from_slice(gk.data());
            off += v.len();
        }
    }
    Ok((f, az, ath))
}

fn continuous_adjoint<F: AdjointField + ?Sized>(
    field: &F,
    theta: &[(String, RealArray)],
    z0: &[f64],
    times: &[f64],
    substeps: usize,
) -> Result<Vec<f64>> {
    let d = field.dim();
    let a_mat = field.linear();
    let n_theta: usize = theta.iter().map(|(_, v)| v.len()).sum();

    let forward = |_: f64, z: &RealArray| {
        let (f, _, _) = field_and_vjp(field, &a_mat, theta, z.data(), &vec![0.0; d])?;
        Ok(RealArray::vector(f))
    };
    let zt = rk4_integrate(&mut FnSystem::new(forward), RealArray::vector(z0.to_vec()), times[0], times, substeps)?
        .pop()
        .expect("non-empty times")
        .into_data();

    // Reversed time τ = T − t, so the sweep runs forward in τ.
    let t_end = *times.last().expect("non-empty times");
    let taus: Vec<f64> = times.iter().rev().map(|t| t_end - t).collect();
    let mut s0 = zt.clone();
    s0.extend(zt.iter().map(|z| 2.0 * z));
    s0.extend(std::iter::repeat(0.0).take(n_theta));
    let backward = |_: f64, s: &RealArray| {
        let s = s.data();
        let (f, az, ath) = field_and_vjp(field, &a_mat, theta, &s[..d], &s[d..2 * d])?;
        let mut out: Vec<f64> = f.iter().map(|v| -v).collect();
        out.extend(az);
        out.extend(ath);
        Ok(RealArray::vector(out))
    };
    let s = rk4_integrate(&mut FnSystem::new(backward), RealArray::vector(s0), taus[0], &taus, substeps)?
        .pop()
        .expect("non-empty times")
        .into_data();
    Ok(s[d..].to_vec())
}

fn finite_differences<F: AdjointField + ?Sized>(
    field: &F,
    theta: &[(String, RealArray)],
    z0: &[f64],
    times: &[f64],
    substeps: usize,
    step: f64,
) -> Result<Vec<f64>> {
    let loss = |z: &[f64], th: &[(String, RealArray)]| Ok::<_, Error>(unrolled(field, th, z, times, substeps, false)?.0);
    let mut out = Vec::new();
    let mut z = z0.to_vec();
    for i in 0..z.len() {
        let orig = z[i];
        let h = step * orig.abs().max(1.0);
        z[i] = orig + h;
        let up = loss(&z, theta)?;
        z[i] = orig - h;
        let down = loss(&z, theta)?;
        z[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    let mut th = theta.to_vec();
    for k in 0..th.len() {
        for j in 0..th[k].1.len() {
            let orig = th[k].1.data()[j];
            let h = step * orig.abs().max(1.0);
            th[k].1.data_mut()[j] = orig + h;
            let up = loss(z0, &th)?;
            th[k].1.data_mut()[j] = orig - h;
            let down = loss(z0, &th)?;
            th[k].1.data_mut()[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Compares `∂L/∂z₀` and `∂L/∂θ` for `L = ‖z(T)‖²`, `T = times.last()`.
pub fn adjoint_gradient_check<F: AdjointField + ?Sized>(
    field: &F,
    z0: &[f64],
    times: &[f64],
    opts: &AdjointOptions,
) -> Result<AdjointReport> {
    if z0.len() != field.dim() {
        return Err(Error::dim("adjoint check", &[field.dim()], &[z0.len()]));
    }
    if times.len() < 2 {
        return Err(Error::Input("adjoint check needs at least two instants".into()));
    }
    let theta = field.parameters();
    let (loss, backprop) = unrolled(field, &theta, z0, times, opts.substeps, true)?;
    let adjoint = continuous_adjoint(field, &theta, z0, times, opts.adjoint_substeps)?;
    let fd = finite_differences(field, &theta, z0, times, opts.substeps, opts.fd_step)?;
    Ok(AdjointReport {
        loss,
        backprop_vs_adjoint: relative_error(&backprop, &adjoint),
        backprop_vs_fd: relative_error(&backprop, &fd),
        adjoint_vs_fd: relative_error(&adjoint, &fd),
        backprop,
        adjoint,
        finite_difference: fd,
    })
}
