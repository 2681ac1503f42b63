//! Neural Modal ODEs: reduced-order latent models of monitored structures.
//!
//! An encoder infers a Gaussian over the initial modal state from the first
//! few sensor samples, a physics-informed latent field (fixed modal
//! stiffness and damping plus a learned residual) is integrated with RK4,
//! and the eigenmode matrix of a physics model decodes the latent trajectory
//! back to every degree of freedom.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod math;
pub mod modal;
pub mod model;
pub mod params;
pub mod training;
pub mod simulator;

pub use error::{Error, Result};
