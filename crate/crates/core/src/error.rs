//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across tensors, schedules, priors,
/// operators, estimators, samplers, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected layout) disagree in shape.
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A constructed tensor contains NaN or infinite entries.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A diffusion step index fell outside the valid range for the schedule.
    #[error("step {step} out of range (schedule has {n_steps} steps)")]
    StepOutOfRange { step: usize, n_steps: usize },

    /// Schedule parameters violate 0 < beta_start <= beta_end < 1 or N >= 1.
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// Prior construction or evaluation failed (weights, shapes, degeneracy).
    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    /// Responsibilities requested at step 0 for a state that is not an atom.
    #[error("degenerate responsibilities at step 0: state matches no atom")]
    DegenerateResponsibilities,

    /// Operator construction or application failed.
    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    /// adjoint() called on an operator without one.
    #[error("adjoint requested for nonlinear operator {kind}")]
    NonlinearAdjoint { kind: String },

    /// A Monte Carlo cost came out NaN/inf; the sample index is reported.
    #[error("non-finite cost at sample {sample}")]
    NonFiniteCost { sample: usize },

    /// The sampler state went NaN/inf; the step index is reported.
    #[error("non-finite sampler state at step {step}")]
    NonFiniteState { step: usize },

    /// The exact oracle only covers linear operators with Gaussian noise.
    #[error("oracle unsupported: {0}")]
    OracleUnsupported(String),

    /// Estimator configuration violates its invariants.
    #[error("invalid guidance config: {0}")]
    InvalidGuidance(String),

    /// Experiment configuration failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A metric or oracle was handed an empty sample list.
    #[error("empty sample set for {0}")]
    EmptySamples(String),

    /// Malformed tensor/image file.
    #[error("bad file format: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag for the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::InvalidPrior(_) => "invalid_prior",
            Error::DegenerateResponsibilities => "degenerate_responsibilities",
            Error::InvalidOperator(_) => "invalid_operator",
            Error::NonlinearAdjoint { .. } => "nonlinear_adjoint",
            Error::NonFiniteCost { .. } => "non_finite_cost",
            Error::NonFiniteState { .. } => "non_finite_state",
            Error::OracleUnsupported(_) => "oracle_unsupported",
            Error::InvalidGuidance(_) => "invalid_guidance",
            Error::InvalidConfig(_) => "invalid_config",
            Error::EmptySamples(_) => "empty_samples",
            Error::Format(_) => "bad_format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
