//! Discrete noise schedule and the forward-noising map.
//!
//! The forward process is q(x_i | x_0) = N(√ᾱ_i·x_0, (1−ᾱ_i)·I) with
//! ᾱ_i = Π_{j≤i} (1−β_j). Index 0 is the clean signal (ᾱ_0 = 1); indices run
//! 1..=N.

use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::tensor::TensorGrid;

/// Immutable diffusion coefficients β_i, α_i, ᾱ_i, σ_i for i in 1..=N
/// (index 0 holds the identity values β=0, α=1, ᾱ=1, σ=0).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from per-step noise rates β_i ∈ (0,1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("no steps".into()));
        }
        if let Some(bad) = betas.iter().find(|b| !(0.0 < **b && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {bad} outside (0,1)")));
        }
        let n = betas.len();
        let mut beta = Vec::with_capacity(n + 1);
        let mut alpha = Vec::with_capacity(n + 1);
        let mut alpha_bar = Vec::with_capacity(n + 1);
        let mut sigma = Vec::with_capacity(n + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        sigma.push(0.0);
        for (i, b) in betas.into_iter().enumerate() {
            beta.push(b);
            alpha.push(1.0 - b);
            alpha_bar.push(alpha_bar[i] * (1.0 - b));
            sigma.push((1.0 - alpha_bar[i + 1]).sqrt());
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// Number of diffusion steps N.
    pub fn n_steps(&self) -> usize {
        self.beta.len() - 1
    }

    fn check(&self, i: usize) {
        assert!(
            i < self.beta.len(),
            "step {i} out of range for schedule with {} steps",
            self.n_steps()
        );
    }

    /// β_i for i in 1..=N (β_0 = 0).
    pub fn beta(&self, i: usize) -> f64 {
        self.check(i);
        self.beta[i]
    }

    /// α_i = 1 − β_i.
    pub fn alpha(&self, i: usize) -> f64 {
        self.check(i);
        self.alpha[i]
    }

    /// ᾱ_i = Π_{j≤i} α_j, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.check(i);
        self.alpha_bar[i]
    }

    /// σ_i = √(1 − ᾱ_i).
    pub fn sigma(&self, i: usize) -> f64 {
        self.check(i);
        self.sigma[i]
    }

    /// Bounds-checked step validation for callers holding user input.
    pub fn validate_step(&self, i: usize) -> Result<()> {
        if i > self.n_steps() {
            return Err(Error::StepOutOfRange {
                step: i,
                n_steps: self.n_steps(),
            });
        }
        Ok(())
    }
}

/// Linear β schedule from `beta_start` to `beta_end` over N steps.
pub fn build_linear_schedule(
    n_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if n_steps == 0 {
        return Err(Error::InvalidSchedule("n_steps must be >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = if n_steps == 1 {
        vec![beta_start]
    } else {
        (0..n_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n_steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// The standard 1000-step linear schedule (β from 1e-4 to 0.02).
pub fn default_schedule() -> NoiseSchedule {
    build_linear_schedule(1000, 1e-4, 0.02).expect("default schedule parameters are valid")
}

/// Draws x_i ~ q(x_i | x_0) = N(√ᾱ_i·x_0, (1−ᾱ_i)·I). Step 0 returns x_0
/// unchanged.
pub fn diffuse_sample(
    x0: &TensorGrid,
    i: usize,
    sched: &NoiseSchedule,
    stream: RandomStream,
) -> Result<TensorGrid> {
    sched.validate_step(i)?;
    if i == 0 {
        return Ok(x0.clone());
    }
    let z = stream.standard_normal(x0.shape());
    x0.scale(sched.alpha_bar(i).sqrt())
        .add_scaled(&z, (1.0 - sched.alpha_bar(i)).sqrt())
}
