//! Fixed-step classical Runge–Kutta (RK4) integration.
//!
//! The integrator is written against [`OdeSystem`], so the same stepping code
//! drives plain arrays and differentiable graph values.

use crate::error::{Error, Result};
use crate::math::array::RealArray;

pub trait OdeSystem {
    type State: Clone;

    fn derivative(&mut self, t: f64, state: &Self::State) -> Result<Self::State>;

    /// `base + Σ cᵢ·termᵢ`
    fn combine(&mut self, base: &Self::State, terms: &[(f64, &Self::State)]) -> Result<Self::State>;

    fn is_finite(&self, state: &Self::State) -> bool;
}

/// States at each requested instant, plus the field evaluated there.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    pub states: Vec<S>,
    pub derivatives: Vec<S>,
}

fn check_times(t0: f64, times: &[f64], substeps: usize) -> Result<()> {
    if substeps == 0 {
        return Err(Error::Input("substeps must be positive".into()));
    }
    if times.is_empty() {
        return Err(Error::Input("no output instants requested".into()));
    }
    if !(times[0] >= t0) {
        return Err(Error::Input(format!(
            "first output instant {} precedes t0 = {t0}",
            times[0]
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("output instants must be strictly ascending".into()));
    }
    Ok(())
}

/// One classical RK4 step; also returns the stage-one slope `f(t, z)`.
pub fn rk4_step<S: OdeSystem>(sys: &mut S, t: f64, z: &S::State, h: f64) -> Result<(S::State, S::State)> {
    let k1 = sys.derivative(t, z)?;
    let z2 = sys.combine(z, &[(0.5 * h, &k1)])?;
    let k2 = sys.derivative(t + 0.5 * h, &z2)?;
    let z3 = sys.combine(z, &[(0.5 * h, &k2)])?;
    let k3 = sys.derivative(t + 0.5 * h, &z3)?;
    let z4 = sys.combine(z, &[(h, &k3)])?;
    let k4 = sys.derivative(t + h, &z4)?;
    let next = sys.combine(
        z,
        &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)],
    )?;
    Ok((next, k1))
}

/// Integrates from `(t0, z0)` and returns the state at every instant in
/// `times`. Each gap between consecutive instants (and between `t0` and the
/// first instant) is split into `substeps` equal RK4 steps.
pub fn rk4_integrate<S: OdeSystem>(
    sys: &mut S,
    z0: S::State,
    t0: f64,
    times: &[f64],
    substeps: usize,
) -> Result<Vec<S::State>> {
    Ok(rk4_trajectory(sys, z0, t0, times, substeps, false)?.states)
}

/// As [`rk4_integrate`], additionally returning `f(tᵢ, z(tᵢ))` at every
/// output instant when `with_derivatives` is set. With one substep the first
/// RK4 stage is reused, so only the final instant costs an extra evaluation.
pub fn rk4_trajectory<S: OdeSystem>(
    sys: &mut S,
    z0: S::State,
    t0: f64,
    times: &[f64],
    substeps: usize,
    with_derivatives: bool,
) -> Result<Trajectory<S::State>> {
    check_times(t0, times, substeps)?;
    let mut states = Vec::with_capacity(times.len());
    let mut derivatives = Vec::new();
    let mut z = z0;
    let mut t = t0;
    // Set once a state is stored and its slope has not been recorded yet.
    let mut slope_pending = false;

    for &target in times {
        if target > t {
            let h = (target - t) / substeps as f64;
            for s in 0..substeps {
                let ts = t + s as f64 * h;
                let (next, k1) = rk4_step(sys, ts, &z, h)?;
                if s == 0 && slope_pending {
                    if with_derivatives {
                        derivatives.push(k1);
                    }
                    slope_pending = false;
                }
                z = next;
                if !sys.is_finite(&z) {
                    return Err(Error::Divergence { instant: ts + h });
                }
            }
            t = target;
        } else if !sys.is_finite(&z) {
            return Err(Error::Divergence { instant: t });
        }
        states.push(z.clone());
        slope_pending = true;
    }
    if slope_pending && with_derivatives {
        derivatives.push(sys.derivative(t, &z)?);
    }
    Ok(Trajectory { states, derivatives })
}

/// Autonomous or time-dependent field over plain arrays.
pub struct FnSystem<F> {
    field: F,
}

impl<F> FnSystem<F>
where
    F: FnMut(f64, &RealArray) -> Result<RealArray>,
{
    pub fn new(field: F) -> Self {
        Self { field }
    }
}

impl<F> OdeSystem for FnSystem<F>
where
    F: FnMut(f64, &RealArray) -> Result<RealArray>,
{
    type State = RealArray;

    fn derivative(&mut self, t: f64, state: &RealArray) -> Result<RealArray> {
        let d = (self.field)(t, state)?;
        if d.shape() != state.shape() {
            return Err(Error::dim("ode field", state.shape(), d.shape()));
        }
        Ok(d)
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

/// Convenience wrapper for plain-array fields.
pub fn rk4_integrate_fn<F>(field: F, z0: RealArray, t0: f64, times: &[f64], substeps: usize) -> Result<Vec<RealArray>>
where
    F: FnMut(f64, &RealArray) -> Result<RealArray>,
{
    rk4_integrate(&mut FnSystem::new(field), z0, t0, times, substeps)
}

/// `t0, t0 + dt, …, t0 + steps·dt`, computed by multiplication to avoid drift.
pub fn uniform_times(t0: f64, dt: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| t0 + i as f64 * dt).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, z: &RealArray) -> Result<RealArray> {
        Ok(z.scale(-1.0))
    }

    #[test]
    fn single_step_of_exponential_decay() {
        // k1 = -1, k2 = -0.95, k3 = -0.9525, k4 = -0.90475
        // z1 = 1 + 0.1/6 * (k1 + 2k2 + 2k3 + k4) = 0.9048375
        let out = rk4_integrate_fn(decay, RealArray::scalar(1.0), 0.0, &[0.1], 1).unwrap();
        assert!((out[0].data()[0] - 0.9048375).abs() < 1e-12);
    }

    #[test]
    fn zero_field_is_constant() {
        let z0 = RealArray::vector(vec![1.5, -2.0]);
        let times = uniform_times(0.0, 0.3, 10);
        let out = rk4_integrate_fn(|_, z| Ok(RealArray::zeros(z.shape())), z0.clone(), 0.0, &times, 3).unwrap();
        assert!(out.iter().all(|z| *z == z0));
    }

    #[test]
    fn harmonic_oscillator_returns_after_one_period() {
        let omega: f64 = 2.0;
        let field = |_: f64, z: &RealArray| {
            let d = z.data();
            Ok(RealArray::vector(vec![d[1], -omega * omega * d[0]]))
        };
        let t_end = std::f64::consts::PI;
        let steps = (t_end / 1e-3).round() as usize;
        let out = rk4_integrate_fn(field, RealArray::vector(vec![1.0, 0.0]), 0.0, &[t_end], steps).unwrap();
        let z = out[0].data();
        assert!((z[0] - 1.0).abs() < 1e-6 && z[1].abs() < 1e-6, "{z:?}");
    }

    #[test]
    fn non_ascending_times_rejected() {
        let err = rk4_integrate_fn(decay, RealArray::scalar(1.0), 0.0, &[0.2, 0.1], 1);
        assert!(matches!(err, Err(Error::Input(_))));
        let err = rk4_integrate_fn(decay, RealArray::scalar(1.0), 0.5, &[0.2], 1);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn divergence_reports_instant() {
        let blowup = |_: f64, z: &RealArray| Ok(z.map(|v| v * v * 1e3));
        let times = uniform_times(0.0, 0.1, 50);
        match rk4_integrate_fn(blowup, RealArray::scalar(10.0), 0.0, &times, 1) {
            Err(Error::Divergence { instant }) => assert!(instant > 0.0 && instant <= 5.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn derivatives_match_field_at_output_instants() {
        let times = uniform_times(0.0, 0.1, 5);
        let mut sys = FnSystem::new(decay);
        let tr = rk4_trajectory(&mut sys, RealArray::scalar(2.0), 0.0, &times, 1, true).unwrap();
        assert_eq!(tr.derivatives.len(), times.len());
        for (z, d) in tr.states.iter().zip(&tr.derivatives) {
            assert_eq!(d.data()[0], -z.data()[0]);
        }
    }
}
