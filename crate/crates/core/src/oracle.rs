//! Exact ground truth for the quantities the guidance estimators approximate:
//! the posterior over atoms p(x_0|y), the conditional score ∇log p_i(x_i|y),
//! and the guidance term σ_i·∇log p_i(y|x_i). Closed forms exist for
//! finite-atom priors with a linear operator and Gaussian noise, and for
//! Gaussian priors when A·Aᵀ is a multiple of the identity.

use crate::error::{Error, Result};
use crate::operators::{DegradationOperator, InverseProblem, NoiseModel};
use crate::prior::{FiniteAtomPrior, GaussianPrior, PriorModel, ScoreModel};
use crate::schedule::NoiseSchedule;
use crate::tensor::TensorGrid;

/// Posterior over the prior's atoms given the observation.
#[derive(Debug, Clone)]
pub struct PosteriorAtoms {
    atoms: Vec<TensorGrid>,
    weights: Vec<f64>,
}

impl PosteriorAtoms {
    pub fn atoms(&self) -> &[TensorGrid] {
        &self.atoms
    }

    /// Posterior weights w̃_k ≥ 0 summing to 1.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn require_linear_gaussian(problem: &InverseProblem) -> Result<f64> {
    if !problem.operator.is_linear() {
        return Err(Error::OracleUnsupported(format!(
            "operator {} is nonlinear",
            problem.operator.kind()
        )));
    }
    match problem.noise {
        NoiseModel::Gaussian { sigma_y } => Ok(sigma_y),
        NoiseModel::Poisson { .. } => {
            Err(Error::OracleUnsupported("Poisson observation noise".into()))
        }
    }
}

/// ln w_k − ‖y − A·a_k‖²/(2σ_y²), unnormalized.
fn joint_log_weights(prior: &FiniteAtomPrior, problem: &InverseProblem) -> Result<Vec<f64>> {
    let sigma_y = require_linear_gaussian(problem)?;
    prior
        .atoms()
        .iter()
        .zip(prior.weights())
        .map(|(a, w)| {
            let residual = problem.y.sub(&problem.apply(a)?)?;
            Ok(w.ln() - residual.dot(&residual)? / (2.0 * sigma_y * sigma_y))
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Exact posterior weights w̃_k ∝ w_k·exp(−‖y − A·a_k‖²/(2σ_y²)).
pub fn exact_posterior_atoms(
    prior: &FiniteAtomPrior,
    problem: &InverseProblem,
) -> Result<PosteriorAtoms> {
    let weights = softmax(&joint_log_weights(prior, problem)?);
    Ok(PosteriorAtoms {
        atoms: prior.atoms().to_vec(),
        weights,
    })
}

/// Exact conditional score ∇log p_i(x_i|y): the noisy marginal of the
/// posterior mixture, evaluated through one stable softmax over
/// ln w_k − ‖y−A·a_k‖²/(2σ_y²) − ‖x−√ᾱ_i·a_k‖²/(2(1−ᾱ_i)).
pub fn exact_conditional_score(
    prior: &FiniteAtomPrior,
    problem: &InverseProblem,
    x: &TensorGrid,
    i: usize,
    sched: &NoiseSchedule,
) -> Result<TensorGrid> {
    let joint = joint_log_weights(prior, problem)?;
    if x.shape() != prior.shape() {
        return Err(Error::ShapeMismatch {
            expected: prior.shape().to_vec(),
            got: x.shape().to_vec(),
        });
    }
    if i == 0 || i > sched.n_steps() {
        return Err(Error::StepOutOfRange {
            step: i,
            n_steps: sched.n_steps(),
        });
    }
    let root_ab = sched.alpha_bar(i).sqrt();
    let var = 1.0 - sched.alpha_bar(i);
    let logits: Vec<f64> = prior
        .atoms()
        .iter()
        .zip(&joint)
        .map(|(a, j)| {
            let d2: f64 = x
                .data()
                .iter()
                .zip(a.data())
                .map(|(xi, ai)| (xi - root_ab * ai).powi(2))
                .sum();
            j - d2 / (2.0 * var)
        })
        .collect();
    let rho = softmax(&logits);
    let mut mean = TensorGrid::zeros(prior.shape());
    for (r, a) in rho.iter().zip(prior.atoms()) {
        mean.axpy(*r, a)?;
    }
    Ok(mean.scale(root_ab).sub(x)?.scale(1.0 / var))
}

/// Exact guidance term σ_i·∇log p_i(y|x_i) = σ_i·(conditional − marginal).
pub fn exact_guidance_score(
    prior: &FiniteAtomPrior,
    problem: &InverseProblem,
    x: &TensorGrid,
    i: usize,
    sched: &NoiseSchedule,
) -> Result<TensorGrid> {
    let cond = exact_conditional_score(prior, problem, x, i, sched)?;
    let marg = prior.marginal_score(x, i, sched)?;
    Ok(cond.sub(&marg)?.scale(sched.sigma(i)))
}

/// Scaling δ such that A·Aᵀ = δ·I, for the operators where that holds.
fn row_orthogonal_gain(op: &DegradationOperator) -> Result<f64> {
    match op {
        DegradationOperator::Identity | DegradationOperator::Inpaint { .. } => Ok(1.0),
        DegradationOperator::AvgPool { factor } => Ok(1.0 / (factor * factor) as f64),
        _ => Err(Error::OracleUnsupported(format!(
            "operator {} has no diagonal A·Aᵀ",
            op.kind()
        ))),
    }
}

/// Exact guidance for a Gaussian prior: with x_0|x_i ~ N(μ_T(x_i), c·I) and
/// A·Aᵀ = δ·I, the likelihood is p(y|x_i) = N(A·μ_T(x_i), (σ_y² + c·δ)·I), so
/// σ_i·∇log p(y|x_i) = σ_i·g·Aᵀ(y − A·μ_T)/(σ_y² + c·δ) with g the Tweedie
/// gain √ᾱ_i·τ²/D_i and c = τ²(1−ᾱ_i)/D_i.
pub fn exact_guidance_score_gaussian(
    prior: &GaussianPrior,
    problem: &InverseProblem,
    x: &TensorGrid,
    i: usize,
    sched: &NoiseSchedule,
) -> Result<TensorGrid> {
    let sigma_y = require_linear_gaussian(problem)?;
    let delta = row_orthogonal_gain(&problem.operator)?;
    let mu = prior.tweedie_mean(x, i, sched)?;
    let ab = sched.alpha_bar(i);
    let d = ab * prior.variance() + (1.0 - ab);
    let gain = ab.sqrt() * prior.variance() / d;
    let c = prior.variance() * (1.0 - ab) / d;
    let residual = problem.y.sub(&problem.apply(&mu)?)?;
    let pulled = problem.operator.adjoint(&residual)?;
    Ok(pulled.scale(sched.sigma(i) * gain / (sigma_y * sigma_y + c * delta)))
}

/// Exact guidance for any supported prior; dispatches on the prior variant.
pub fn exact_guidance_for(
    prior: &PriorModel,
    problem: &InverseProblem,
    x: &TensorGrid,
    i: usize,
    sched: &NoiseSchedule,
) -> Result<TensorGrid> {
    match prior {
        PriorModel::Atoms(p) => exact_guidance_score(p, problem, x, i, sched),
        PriorModel::Gaussian(p) => exact_guidance_score_gaussian(p, problem, x, i, sched),
    }
}

/// Cosine similarity between an estimate and the exact direction. Two zero
/// vectors agree perfectly (1); a zero against a nonzero scores 0.
pub fn direction_accuracy(estimate: &TensorGrid, exact: &TensorGrid) -> Result<f64> {
    if estimate.shape() != exact.shape() {
        return Err(Error::ShapeMismatch {
            expected: exact.shape().to_vec(),
            got: estimate.shape().to_vec(),
        });
    }
    let (na, nb) = (estimate.norm2(), exact.norm2());
    if na == 0.0 && nb == 0.0 {
        return Ok(1.0);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(estimate.dot(exact)? / (na * nb))
}

/// Total-variation distance between the empirical atom assignment of samples
/// and the exact posterior weights. Each sample goes to its nearest atom in
/// Euclidean distance, ties resolved to the lowest atom index.
pub fn posterior_tv_distance(samples: &[TensorGrid], exact: &PosteriorAtoms) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples("posterior TV distance".into()));
    }
    let mut counts = vec![0usize; exact.atoms.len()];
    for s in samples {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (k, a) in exact.atoms.iter().enumerate() {
            let d2 = s.sub(a)?.dot(&s.sub(a)?)?;
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        counts[best] += 1;
    }
    let n = samples.len() as f64;
    let tv = counts
        .iter()
        .zip(&exact.weights)
        .map(|(c, w)| (*c as f64 / n - w).abs())
        .sum::<f64>()
        / 2.0;
    Ok(tv)
}
