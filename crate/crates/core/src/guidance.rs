//! Guidance estimators for the conditional score term σ_i·∇log p_i(y|x_i):
//! the Monte Carlo policy-gradient estimator (with leave-one-out baselines
//! and a single aggregated vector-Jacobian product), the pointwise
//! loss-gradient baseline, and the rescale-and-combine step that attaches
//! either estimate to the unconditional noise prediction.

use crate::error::{Error, Result};
use crate::operators::{InverseProblem, NoiseModel};
use crate::prior::ScoreModel;
use crate::rng::RandomStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::TensorGrid;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Which guidance estimator the sampler runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Dpg,
    Dps,
    Oracle,
}

impl Estimator {
    /// Stable lowercase name matching the configuration spelling.
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Dpg => "dpg",
            Estimator::Dps => "dps",
            Estimator::Oracle => "oracle",
        }
    }
}

/// How the raw guidance estimate is rescaled before combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleConvention {
    /// s = ε + B·s̃/‖s̃‖ (guidance contributes exactly norm B).
    UnitNorm,
    /// s = ε + B·s̃/‖s̃‖² (division by the squared norm).
    LiteralSqNorm,
}

/// Normalization constant Z_i for the conditional weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMode {
    /// Z_i = ℓ_y(A(μ_i)) in the loss's own sum form.
    Sum,
    /// Z_i = r_i² for squared-L2 losses; mean absolute residual for L1.
    PerPixel,
}

/// Estimator settings; field names map one-to-one onto config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub estimator: Estimator,
    pub n_mc: usize,
    pub guidance_norm: f64,
    pub rescale_convention: RescaleConvention,
    pub z_mode: ZMode,
    pub r_floor: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::Dpg,
            n_mc: 500,
            guidance_norm: 200.0,
            rescale_convention: RescaleConvention::UnitNorm,
            z_mode: ZMode::Sum,
            r_floor: 1e-4,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.estimator == Estimator::Dpg && self.n_mc < 2 {
            return Err(Error::InvalidGuidance(format!(
                "n_mc must be >= 2 for the Monte Carlo estimator, got {}",
                self.n_mc
            )));
        }
        if !(self.guidance_norm.is_finite() && self.guidance_norm > 0.0) {
            return Err(Error::InvalidGuidance(format!(
                "guidance_norm must be finite and > 0, got {}",
                self.guidance_norm
            )));
        }
        if !(self.r_floor.is_finite() && self.r_floor > 0.0) {
            return Err(Error::InvalidGuidance(format!(
                "r_floor must be finite and > 0, got {}",
                self.r_floor
            )));
        }
        Ok(())
    }
}

/// Per-step estimator diagnostics.
#[derive(Debug, Clone)]
pub struct GuidanceStepState {
    /// Posterior mean μ_i(x_i).
    pub mu: TensorGrid,
    /// Surrogate standard deviation r_i.
    pub r: f64,
    /// Weight normalization Z_i.
    pub z: f64,
    /// Conditional weights c_m ∈ (0,1].
    pub costs: Vec<f64>,
    /// Leave-one-out (or zero) baselines b_m.
    pub baselines: Vec<f64>,
    /// Raw guidance estimate s̃_i.
    pub s_tilde: TensorGrid,
    /// Combined score after rescaling, filled in by the sampler.
    pub s_combined: Option<TensorGrid>,
}

/// r_i = max(r_floor, √(‖y − A(μ)‖₂²/d)) with d the element count of x_0.
pub fn residual_std(problem: &InverseProblem, mu: &TensorGrid, r_floor: f64) -> Result<f64> {
    let residual = problem.y.sub(&problem.apply(mu)?)?;
    let d: usize = problem.x_shape.iter().product();
    Ok((residual.dot(&residual)? / d as f64).sqrt().max(r_floor))
}

/// Adaptive Z_i, floored at r_floor².
pub fn adaptive_z(
    problem: &InverseProblem,
    mu: &TensorGrid,
    z_mode: ZMode,
    r_floor: f64,
) -> Result<f64> {
    let amu = problem.apply(mu)?;
    let z = match z_mode {
        ZMode::Sum => problem.loss(&amu)?,
        ZMode::PerPixel => {
            let d: usize = problem.x_shape.iter().product();
            problem.loss(&amu)? / d as f64
        }
    };
    Ok(z.max(r_floor * r_floor))
}

fn weights_from_losses(losses: &[f64], z: f64) -> Result<Vec<f64>> {
    if let Some(sample) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFiniteCost { sample });
    }
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let costs: Vec<f64> = losses.iter().map(|l| (-(l - min) / z).exp()).collect();
    if let Some(sample) = costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFiniteCost { sample });
    }
    Ok(costs)
}

/// Conditional weights c_m = exp(−(ℓ_m − min_j ℓ_j)/Z) for candidate clean
/// signals; the min-shift keeps every weight in (0,1] with at least one 1.
pub fn conditional_weights(
    problem: &InverseProblem,
    samples: &[TensorGrid],
    z: f64,
) -> Result<Vec<f64>> {
    let losses: Vec<f64> = samples
        .iter()
        .map(|s| problem.loss(&problem.apply(s)?))
        .collect::<Result<_>>()?;
    weights_from_losses(&losses, z)
}

/// Leave-one-out baselines b_m = (Σ_{j≠m} c_j)/(N−1).
pub fn loo_baselines(costs: &[f64]) -> Result<Vec<f64>> {
    if costs.len() < 2 {
        return Err(Error::InvalidGuidance(format!(
            "leave-one-out baselines need at least two costs, got {}",
            costs.len()
        )));
    }
    let total: f64 = costs.iter().sum();
    let n = costs.len() as f64;
    Ok(costs.iter().map(|c| (total - c) / (n - 1.0)).collect())
}

/// Baseline choice for the Monte Carlo estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineMode {
    #[default]
    LeaveOneOut,
    /// No variance reduction (b_m = 0); kept for controlled comparisons.
    Zero,
}

/// Overrides for controlled experiments.
#[derive(Debug, Clone, Copy, Default)]
pub struct DpgOptions {
    /// Force the surrogate width r_i instead of the adaptive residual value.
    pub r_override: Option<f64>,
    pub baseline: BaselineMode,
}

/// Monte Carlo guidance estimate via the policy-gradient identity:
/// draws x_0^(m) = μ_i + r_i·ξ_m, weights them by the conditional likelihood
/// of y, and pulls the weighted noise directions back through the posterior
/// mean with one aggregated vector-Jacobian product:
/// s̃ = (1/(r_i·N))·(∂μ/∂x)ᵀ Σ_m (c_m − b_m)·ξ_m.
pub fn dpg_score(
    model: &dyn ScoreModel,
    problem: &InverseProblem,
    x: &TensorGrid,
    i: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    stream: RandomStream,
) -> Result<(TensorGrid, GuidanceStepState)> {
    dpg_score_with(
        model,
        problem,
        x,
        i,
        sched,
        cfg,
        stream,
        DpgOptions::default(),
    )
}

/// [`dpg_score`] with explicit overrides.
#[allow(clippy::too_many_arguments)]
pub fn dpg_score_with(
    model: &dyn ScoreModel,
    problem: &InverseProblem,
    x: &TensorGrid,
    i: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    stream: RandomStream,
    opts: DpgOptions,
) -> Result<(TensorGrid, GuidanceStepState)> {
    if cfg.n_mc < 2 {
        return Err(Error::InvalidGuidance(format!(
            "n_mc must be >= 2, got {}",
            cfg.n_mc
        )));
    }
    let mu = model.tweedie_mean(x, i, sched)?;
    let r = match opts.r_override {
        Some(r) => r.max(cfg.r_floor),
        None => residual_std(problem, &mu, cfg.r_floor)?,
    };
    let z = adaptive_z(problem, &mu, cfg.z_mode, cfg.r_floor)?;

    // Candidate draws and their losses; each sample has its own substream so
    // the result is independent of the parallel schedule. The candidate
    // x_0^(m) = μ + r·ξ_m is written into a per-task scratch tensor to keep
    // the inner loop allocation-light.
    let draws: Vec<(Vec<f64>, f64)> = (0..cfg.n_mc)
        .into_par_iter()
        .with_min_len(64)
        .map_init(
            || mu.clone(),
            |candidate, m| {
                let xi = stream.child("mc", m as u64).standard_normal_vec(mu.len());
                for ((slot, &mean), &noise) in
                    candidate.data_mut().iter_mut().zip(mu.data()).zip(&xi)
                {
                    *slot = mean + r * noise;
                }
                let loss = problem.loss(&problem.apply(candidate)?)?;
                Ok((xi, loss))
            },
        )
        .collect::<Result<_>>()?;

    let losses: Vec<f64> = draws.iter().map(|(_, l)| *l).collect();
    let costs = weights_from_losses(&losses, z)?;
    let baselines = match opts.baseline {
        BaselineMode::LeaveOneOut => loo_baselines(&costs)?,
        BaselineMode::Zero => vec![0.0; costs.len()],
    };

    // Fixed-order reduction of the weighted noise directions.
    let mut weighted = TensorGrid::zeros(mu.shape());
    for ((xi, _), (c, b)) in draws.iter().zip(costs.iter().zip(&baselines)) {
        let k = c - b;
        for (acc, noise) in weighted.data_mut().iter_mut().zip(xi) {
            *acc += k * noise;
        }
    }
    let s_tilde = model
        .tweedie_vjp(x, i, sched, &weighted)?
        .scale(1.0 / (r * cfg.n_mc as f64));

    let state = GuidanceStepState {
        mu,
        r,
        z,
        costs,
        baselines,
        s_tilde: s_tilde.clone(),
        s_combined: None,
    };
    Ok((s_tilde, state))
}

fn sign_of(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Pointwise baseline: the negative gradient of the reconstruction loss at
/// the posterior mean, −∇_{x_i} ℓ_y(A(μ_i(x_i))), via the chain rule
/// Jᵀ_μ · Jᵀ_A · ∂ℓ/∂(Aμ). The L1 loss uses its entrywise sign subgradient.
pub fn dps_score(
    model: &dyn ScoreModel,
    problem: &InverseProblem,
    x: &TensorGrid,
    i: usize,
    sched: &NoiseSchedule,
) -> Result<TensorGrid> {
    let mu = model.tweedie_mean(x, i, sched)?;
    let amu = problem.apply(&mu)?;
    let residual = problem.y.sub(&amu)?;
    let grad_out = match problem.noise {
        // ∂‖y−u‖²/∂u = −2(y−u)
        NoiseModel::Gaussian { .. } => residual.scale(-2.0),
        // ∂‖y−u‖₁/∂u = −sgn(y−u), with sgn(0) = 0
        NoiseModel::Poisson { .. } => residual.map(|v| -sign_of(v)),
    };
    let pulled = problem.operator.operator_vjp(&mu, &grad_out)?;
    Ok(model.tweedie_vjp(x, i, sched, &pulled)?.scale(-1.0))
}

/// Combines the unconditional score with the rescaled guidance estimate.
/// A zero estimate (or zero budget) leaves the unconditional score unchanged.
pub fn rescale_and_combine(
    eps: &TensorGrid,
    s_tilde: &TensorGrid,
    cfg: &GuidanceConfig,
) -> Result<TensorGrid> {
    if eps.shape() != s_tilde.shape() {
        return Err(Error::ShapeMismatch {
            expected: eps.shape().to_vec(),
            got: s_tilde.shape().to_vec(),
        });
    }
    let norm = s_tilde.norm2();
    if norm == 0.0 || cfg.guidance_norm == 0.0 {
        return Ok(eps.clone());
    }
    let scale = match cfg.rescale_convention {
        RescaleConvention::UnitNorm => cfg.guidance_norm / norm,
        RescaleConvention::LiteralSqNorm => cfg.guidance_norm / (norm * norm),
    };
    eps.add_scaled(s_tilde, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{synthesize_observation, DegradationOperator};
    use crate::oracle::{direction_accuracy, exact_guidance_score_gaussian};
    use crate::prior::{FiniteAtomPrior, GaussianPrior};
    use crate::schedule::NoiseSchedule;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn quarter_schedule() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.75, 0.5]).unwrap()
    }

    fn identity_problem(y: Vec<f64>, noise: NoiseModel) -> InverseProblem {
        let y = TensorGrid::vector(y).unwrap();
        let shape = y.shape().to_vec();
        InverseProblem::new(DegradationOperator::identity(), noise, y, shape).unwrap()
    }

    fn gaussian(sigma: f64) -> NoiseModel {
        NoiseModel::gaussian(sigma).unwrap()
    }

    #[test]
    fn residual_std_examples() {
        let problem = identity_problem(vec![0.1; 4], gaussian(0.05));
        let mu = TensorGrid::vector(vec![0.0; 4]).unwrap();
        assert_relative_eq!(
            residual_std(&problem, &mu, 1e-4).unwrap(),
            0.1,
            max_relative = 1e-12
        );
        // Exact fit floors at r_floor.
        let fit = identity_problem(vec![0.3, 0.4], gaussian(0.05));
        let mu_fit = TensorGrid::vector(vec![0.3, 0.4]).unwrap();
        assert_relative_eq!(residual_std(&fit, &mu_fit, 1e-4).unwrap(), 1e-4);
        // Residual [3,4] over 2 elements: √(25/2).
        let wide = identity_problem(vec![3.0, 4.0], gaussian(0.05));
        let zero = TensorGrid::vector(vec![0.0, 0.0]).unwrap();
        assert_relative_eq!(
            residual_std(&wide, &zero, 1e-4).unwrap(),
            12.5f64.sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn adaptive_z_examples() {
        let zero = TensorGrid::vector(vec![0.0, 0.0]).unwrap();
        // Poisson sum mode: L1 of [3,−4] = 7.
        let poisson = identity_problem(vec![3.0, -4.0], NoiseModel::poisson(1.0, 255.0).unwrap());
        assert_relative_eq!(adaptive_z(&poisson, &zero, ZMode::Sum, 1e-4).unwrap(), 7.0);
        // Gaussian sum mode: squared L2 of [3,4] = 25.
        let g = identity_problem(vec![3.0, 4.0], gaussian(0.05));
        assert_relative_eq!(adaptive_z(&g, &zero, ZMode::Sum, 1e-4).unwrap(), 25.0);
        // Gaussian per-element mode: 25/2.
        assert_relative_eq!(adaptive_z(&g, &zero, ZMode::PerPixel, 1e-4).unwrap(), 12.5);
        // Exact fit floors at r_floor².
        let fit = identity_problem(vec![1.0], gaussian(0.05));
        let mu = TensorGrid::vector(vec![1.0]).unwrap();
        assert_relative_eq!(adaptive_z(&fit, &mu, ZMode::Sum, 1e-3).unwrap(), 1e-6);
    }

    #[test]
    fn conditional_weight_examples() {
        // Identity problem with y = 0 makes the loss ‖x‖²: craft samples with
        // losses [10, 12, 10].
        let problem = identity_problem(vec![0.0], gaussian(1.0));
        let samples = vec![
            TensorGrid::vector(vec![10.0f64.sqrt()]).unwrap(),
            TensorGrid::vector(vec![12.0f64.sqrt()]).unwrap(),
            TensorGrid::vector(vec![-(10.0f64.sqrt())]).unwrap(),
        ];
        let costs = conditional_weights(&problem, &samples, 10.0).unwrap();
        assert_relative_eq!(costs[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(costs[1], (-0.2f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(costs[2], 1.0, max_relative = 1e-12);
        // Flat-weight limit as Z grows.
        let flat = conditional_weights(&problem, &samples, 1e12).unwrap();
        for c in flat {
            assert_relative_eq!(c, 1.0, max_relative = 1e-9);
        }
        // Equal losses give all ones.
        let equal = conditional_weights(&problem, &vec![samples[0].clone(); 4], 10.0).unwrap();
        assert!(equal.iter().all(|c| *c == 1.0));
    }

    #[test]
    fn weight_costs_are_shift_invariant_in_the_losses() {
        let a = weights_from_losses(&[5.0, 7.0, 6.0], 2.0).unwrap();
        let b = weights_from_losses(&[105.0, 107.0, 106.0], 2.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
    }

    #[test]
    fn loo_baseline_examples() {
        assert_eq!(
            loo_baselines(&[1.0, 2.0, 3.0]).unwrap(),
            vec![2.5, 2.0, 1.5]
        );
        let flat = loo_baselines(&[0.7, 0.7, 0.7, 0.7]).unwrap();
        for b in &flat {
            assert_relative_eq!(*b, 0.7, max_relative = 1e-14);
        }
        assert!(loo_baselines(&[1.0]).is_err());
    }

    #[test]
    fn single_atom_guidance_is_exactly_zero() {
        let prior = FiniteAtomPrior::uniform(vec![TensorGrid::vector(vec![0.7]).unwrap()]).unwrap();
        let problem = identity_problem(vec![0.4], gaussian(0.5));
        let sched = quarter_schedule();
        let x = TensorGrid::vector(vec![0.1]).unwrap();
        let cfg = GuidanceConfig {
            n_mc: 16,
            ..GuidanceConfig::default()
        };
        let (s, state) =
            dpg_score(&prior, &problem, &x, 1, &sched, &cfg, RandomStream::new(3)).unwrap();
        assert_eq!(s.linf(), 0.0);
        assert!(state.r >= cfg.r_floor);
    }

    #[test]
    fn equal_costs_cancel_against_the_baseline() {
        // With every cost equal the centered weights are identically zero, so
        // the weighted direction (and the estimate) vanish.
        let costs = vec![0.42; 8];
        let baselines = loo_baselines(&costs).unwrap();
        let centered: f64 = costs
            .iter()
            .zip(&baselines)
            .map(|(c, b)| (c - b).abs())
            .sum();
        assert!(centered <= 1e-14);
    }

    #[test]
    fn dpg_matches_the_gaussian_oracle_direction() {
        // N(0,1) prior, identity operator, σ_y = 0.5, d = 4: with many draws
        // the Monte Carlo direction aligns with the closed-form guidance.
        let prior = GaussianPrior::standard(&[4]);
        let x0 = prior.sample(RandomStream::new(51).child("x0", 0));
        let synth = synthesize_observation(
            DegradationOperator::identity(),
            gaussian(0.5),
            &x0,
            RandomStream::new(51).child("obs", 0),
        )
        .unwrap();
        let sched = quarter_schedule();
        let x = RandomStream::new(51).child("x", 0).standard_normal(&[4]);
        let cfg = GuidanceConfig {
            n_mc: 100_000,
            ..GuidanceConfig::default()
        };
        let (s, _) = dpg_score(
            &prior,
            &synth.problem,
            &x,
            1,
            &sched,
            &cfg,
            RandomStream::new(51).child("guidance", 0),
        )
        .unwrap();
        let exact = exact_guidance_score_gaussian(&prior, &synth.problem, &x, 1, &sched).unwrap();
        let cos = direction_accuracy(&s, &exact).unwrap();
        assert!(cos >= 0.95, "cosine {cos}");
    }

    #[test]
    fn dps_is_zero_at_a_perfect_fit() {
        let prior = GaussianPrior::standard(&[2]);
        let sched = quarter_schedule();
        let x = TensorGrid::vector(vec![0.5, -0.2]).unwrap();
        let mu = prior.tweedie_mean(&x, 1, &sched).unwrap();
        let problem = identity_problem(mu.data().to_vec(), gaussian(0.1));
        let g = dps_score(&prior, &problem, &x, 1, &sched).unwrap();
        assert!(g.linf() <= 1e-14);
        // The Poisson subgradient at zero residual must also vanish.
        let poisson =
            identity_problem(mu.data().to_vec(), NoiseModel::poisson(1.0, 255.0).unwrap());
        let gp = dps_score(&prior, &poisson, &x, 1, &sched).unwrap();
        assert_eq!(gp.linf(), 0.0);
    }

    #[test]
    fn dps_closed_form_for_identity_gaussian() {
        // μ = √ᾱ·x, so −∇‖y−μ‖² = 2√ᾱ·(y − √ᾱ·x).
        let prior = GaussianPrior::standard(&[2]);
        let sched = quarter_schedule();
        let x = TensorGrid::vector(vec![0.5, -0.2]).unwrap();
        let problem = identity_problem(vec![1.0, 0.3], gaussian(0.1));
        let g = dps_score(&prior, &problem, &x, 1, &sched).unwrap();
        let ab = sched.alpha_bar(1);
        for j in 0..2 {
            let want = 2.0 * ab.sqrt() * (problem.y.data()[j] - ab.sqrt() * x.data()[j]);
            assert_relative_eq!(g.data()[j], want, max_relative = 1e-12);
        }
    }

    #[test]
    fn dps_matches_finite_differences_of_the_pulled_back_loss() {
        let prior = FiniteAtomPrior::uniform(vec![
            TensorGrid::vector(vec![1.0]).unwrap(),
            TensorGrid::vector(vec![-1.0]).unwrap(),
        ])
        .unwrap();
        let problem = identity_problem(vec![0.6], gaussian(0.5));
        let sched = quarter_schedule();
        let x = TensorGrid::vector(vec![0.3]).unwrap();
        let g = dps_score(&prior, &problem, &x, 1, &sched).unwrap();
        let loss_of = |x: &TensorGrid| {
            let mu = prior.tweedie_mean(x, 1, &sched).unwrap();
            problem.loss(&problem.apply(&mu).unwrap()).unwrap()
        };
        let h = 1e-6;
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[0] += h;
        xm.data_mut()[0] -= h;
        let fd = -(loss_of(&xp) - loss_of(&xm)) / (2.0 * h);
        assert_relative_eq!(g.data()[0], fd, max_relative = 1e-5);
    }

    #[test]
    fn rescale_examples() {
        let eps = TensorGrid::vector(vec![0.0, 0.0]).unwrap();
        let s = TensorGrid::vector(vec![3.0, 4.0]).unwrap();
        let unit = GuidanceConfig {
            guidance_norm: 10.0,
            rescale_convention: RescaleConvention::UnitNorm,
            ..GuidanceConfig::default()
        };
        let combined = rescale_and_combine(&eps, &s, &unit).unwrap();
        assert_relative_eq!(combined.data()[0], 6.0, max_relative = 1e-12);
        assert_relative_eq!(combined.data()[1], 8.0, max_relative = 1e-12);

        let literal = GuidanceConfig {
            guidance_norm: 10.0,
            rescale_convention: RescaleConvention::LiteralSqNorm,
            ..GuidanceConfig::default()
        };
        let combined = rescale_and_combine(&eps, &s, &literal).unwrap();
        assert_relative_eq!(combined.data()[0], 1.2, max_relative = 1e-12);
        assert_relative_eq!(combined.data()[1], 1.6, max_relative = 1e-12);

        let zero = TensorGrid::vector(vec![0.0, 0.0]).unwrap();
        let eps2 = TensorGrid::vector(vec![0.7, -0.1]).unwrap();
        assert_eq!(rescale_and_combine(&eps2, &zero, &unit).unwrap(), eps2);
    }

    #[test]
    fn unit_norm_combination_ignores_positive_scaling() {
        let eps = TensorGrid::vector(vec![0.2, -0.4, 0.1]).unwrap();
        let s = TensorGrid::vector(vec![1.0, 2.0, -0.5]).unwrap();
        let cfg = GuidanceConfig {
            guidance_norm: 3.0,
            rescale_convention: RescaleConvention::UnitNorm,
            ..GuidanceConfig::default()
        };
        let a = rescale_and_combine(&eps, &s, &cfg).unwrap();
        let b = rescale_and_combine(&eps, &s.scale(37.5), &cfg).unwrap();
        assert!(a.sub(&b).unwrap().linf() <= 1e-12);
    }

    #[test]
    fn loo_baselines_reduce_estimator_variance() {
        // Fixed toy state; per-entry variance over independent estimates with
        // LOO baselines must not exceed the zero-baseline variance.
        let prior = FiniteAtomPrior::uniform(vec![
            TensorGrid::vector(vec![1.0, 0.5]).unwrap(),
            TensorGrid::vector(vec![-1.0, -0.5]).unwrap(),
        ])
        .unwrap();
        let problem = identity_problem(vec![0.8, 0.4], gaussian(0.5));
        let sched = quarter_schedule();
        let x = TensorGrid::vector(vec![0.4, 0.1]).unwrap();
        let cfg = GuidanceConfig {
            n_mc: 8,
            ..GuidanceConfig::default()
        };
        let root = RandomStream::new(404);
        let variance_with = |mode: BaselineMode| {
            let reps = 200;
            let mut estimates = Vec::with_capacity(reps);
            for rep in 0..reps as u64 {
                let (s, _) = dpg_score_with(
                    &prior,
                    &problem,
                    &x,
                    1,
                    &sched,
                    &cfg,
                    root.child("rep", rep),
                    DpgOptions {
                        r_override: None,
                        baseline: mode,
                    },
                )
                .unwrap();
                estimates.push(s);
            }
            let mut total = 0.0;
            for j in 0..x.len() {
                let vals: Vec<f64> = estimates.iter().map(|e| e.data()[j]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                total +=
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            }
            total / x.len() as f64
        };
        let with_loo = variance_with(BaselineMode::LeaveOneOut);
        let without = variance_with(BaselineMode::Zero);
        assert!(
            with_loo <= without,
            "LOO variance {with_loo} vs zero-baseline {without}"
        );
    }

    #[test]
    fn dpg_is_deterministic_for_a_fixed_stream() {
        let prior = FiniteAtomPrior::uniform(vec![
            TensorGrid::vector(vec![1.0]).unwrap(),
            TensorGrid::vector(vec![-1.0]).unwrap(),
        ])
        .unwrap();
        let problem = identity_problem(vec![0.9], gaussian(0.5));
        let sched = quarter_schedule();
        let x = TensorGrid::vector(vec![0.2]).unwrap();
        let cfg = GuidanceConfig {
            n_mc: 64,
            ..GuidanceConfig::default()
        };
        let run = || {
            dpg_score(&prior, &problem, &x, 1, &sched, &cfg, RandomStream::new(9))
                .unwrap()
                .0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        let mut cfg = GuidanceConfig::default();
        cfg.validate().unwrap();
        cfg.n_mc = 1;
        assert!(cfg.validate().is_err());
        cfg.estimator = Estimator::Dps;
        cfg.validate().unwrap();
        cfg.guidance_norm = -1.0;
        assert!(cfg.validate().is_err());
        cfg.guidance_norm = 1.0;
        cfg.r_floor = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_serde_round_trip_with_snake_case_keys() {
        let json = r#"{
            "estimator": "dpg",
            "n_mc": 100,
            "guidance_norm": 2.5,
            "rescale_convention": "literal_sq_norm",
            "z_mode": "per_pixel",
            "r_floor": 0.001
        }"#;
        let cfg: GuidanceConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.n_mc, 100);
        assert_eq!(cfg.rescale_convention, RescaleConvention::LiteralSqNorm);
        assert_eq!(cfg.z_mode, ZMode::PerPixel);
        let back: GuidanceConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        // Omitted keys fall back to defaults.
        let partial: GuidanceConfig = serde_json::from_str(r#"{"estimator":"dps"}"#).unwrap();
        assert_eq!(partial.estimator, Estimator::Dps);
        assert_eq!(partial.n_mc, GuidanceConfig::default().n_mc);
    }

    proptest! {
        #[test]
        fn centered_costs_sum_to_zero(
            costs in proptest::collection::vec(0.01f64..1.0, 2..32),
        ) {
            let baselines = loo_baselines(&costs).unwrap();
            let total: f64 = costs.iter().zip(&baselines).map(|(c, b)| c - b).sum();
            prop_assert!(total.abs() <= 1e-12);
        }
    }
}
