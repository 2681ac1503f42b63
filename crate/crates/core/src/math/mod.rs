//! Array arithmetic, reverse-mode differentiation and RK4 integration.

pub mod array;
pub mod autodiff;
pub mod ode;

pub use array::RealArray;
pub use autodiff::{Gradients, Graph, Var};
pub use ode::{rk4_integrate, rk4_integrate_fn, rk4_trajectory, uniform_times, OdeSystem};
