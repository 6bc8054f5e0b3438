//! Core library for guided diffusion posterior sampling on analytic priors.
//!
//! The crate provides dense tensors and deterministic splittable randomness,
//! discrete noise schedules, priors with closed-form scores (finite atom
//! mixtures and Gaussians), degradation operators with adjoints, Monte Carlo
//! and pointwise guidance estimators, exact conditional-score oracles, and
//! reverse-process solvers, plus experiment drivers that tie them together.

pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod operators;
pub mod oracle;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
