//! Conditional reverse-process solvers: the stochastic ancestral update, the
//! deterministic skip-step update, and the end-to-end guided solve loop that
//! combines the unconditional score with a guidance estimate at every visited
//! step.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::guidance::{dpg_score, dps_score, rescale_and_combine, Estimator, GuidanceConfig};
use crate::operators::InverseProblem;
use crate::oracle::{direction_accuracy, exact_guidance_for};
use crate::prior::{PriorModel, ScoreModel};
use crate::rng::RandomStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::TensorGrid;

/// One ancestral update x_{i−1} = x_i/√α_i + ((1−α_i)/√(1−ᾱ_i))·s_i + √β_i·z̄.
///
/// `s` is the combined score in drift convention (σ_i·∇log p_i plus guidance).
/// The fresh noise z̄ is omitted on the final step i = 1.
pub fn ddpm_step(
    x: &TensorGrid,
    s: &TensorGrid,
    i: usize,
    sched: &NoiseSchedule,
    stream: RandomStream,
) -> Result<TensorGrid> {
    if i == 0 || i > sched.n_steps() {
        return Err(Error::StepOutOfRange {
            step: i,
            n_steps: sched.n_steps(),
        });
    }
    let mean = x.scale(1.0 / sched.alpha(i).sqrt()).add_scaled(
        s,
        (1.0 - sched.alpha(i)) / (1.0 - sched.alpha_bar(i)).sqrt(),
    )?;
    if i == 1 {
        return Ok(mean);
    }
    let z = stream.standard_normal(x.shape());
    mean.add_scaled(&z, sched.beta(i).sqrt())
}

/// One deterministic skip update from step i to i_prev < i:
/// x = √(ᾱ_p/ᾱ_i)·x_i + √ᾱ_p·(√((1−ᾱ_p)/ᾱ_p) − √((1−ᾱ_i)/ᾱ_i))·s_i.
///
/// `s` is the combined score in noise-prediction convention (ε plus guidance
/// with matching sign).
pub fn ddim_step(
    x: &TensorGrid,
    s: &TensorGrid,
    i: usize,
    i_prev: usize,
    sched: &NoiseSchedule,
) -> Result<TensorGrid> {
    if i_prev >= i || i > sched.n_steps() {
        return Err(Error::StepOutOfRange {
            step: i,
            n_steps: sched.n_steps(),
        });
    }
    let abi = sched.alpha_bar(i);
    let abp = sched.alpha_bar(i_prev);
    let coeff = abp.sqrt() * (((1.0 - abp) / abp).sqrt() - ((1.0 - abi) / abi).sqrt());
    x.scale((abp / abi).sqrt()).add_scaled(s, coeff)
}

/// Reverse-process solver choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    /// Full ancestral sampling over every step N..1.
    Ddpm,
    /// Deterministic sampling over a uniform subsequence of `steps` points.
    Ddim { steps: usize },
}

/// Whether to evaluate the exact guidance alongside the estimator for the
/// trace's cosine column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OracleMode {
    #[default]
    Off,
    Trace,
}

/// Per-step diagnostics recorded during a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Ordinal position in the visit sequence (0-based).
    pub step: usize,
    /// Diffusion step index the update was computed at.
    pub i: usize,
    /// Surrogate width r_i.
    pub r_i: f64,
    /// ‖y − A(μ_i)‖₂ at the visited state.
    pub recon_l2: f64,
    /// ‖s̃_i‖₂ of the raw guidance estimate.
    pub s_tilde_norm: f64,
    /// Cosine between the estimate and the exact guidance, when traced.
    pub cos_oracle: Option<f64>,
}

/// Full record of one guided solve.
#[derive(Debug, Clone)]
pub struct SamplerTrace {
    pub records: Vec<TraceRecord>,
    pub x0: TensorGrid,
    pub wall: Duration,
}

impl SamplerTrace {
    /// CSV serialization; wall time is deliberately excluded so identical
    /// (config, seed) inputs produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,i,r_i,recon_l2,s_tilde_norm,cos_oracle\n");
        for r in &self.records {
            let cos = r.cos_oracle.map(|c| c.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.i, r.r_i, r.recon_l2, r.s_tilde_norm, cos
            ));
        }
        out
    }
}

/// The descending (i, i_prev) visit pairs for a solver over an N-step
/// schedule. Skip points are the distinct values of k·N/steps.
fn visit_pairs(solver: SolverKind, n: usize) -> Result<Vec<(usize, usize)>> {
    match solver {
        SolverKind::Ddpm => Ok((1..=n).rev().map(|i| (i, i - 1)).collect()),
        SolverKind::Ddim { steps } => {
            if steps == 0 {
                return Err(Error::InvalidConfig(
                    "skip solver needs at least one step".into(),
                ));
            }
            let mut points: Vec<usize> = (0..=steps).map(|k| k * n / steps).collect();
            points.dedup();
            Ok(points.windows(2).rev().map(|w| (w[1], w[0])).collect())
        }
    }
}

/// Runs the guided reverse process from x_N ~ N(0,I) down to x_0.
///
/// At each visited step the unconditional noise prediction ε_i is converted
/// to drift convention, the configured estimator produces s̃_i, the two are
/// combined (the exact-oracle estimator adds its guidance verbatim, skipping
/// the norm rescale), and the solver advances. Diagnostics land in the trace.
pub fn solve_inverse(
    model: &PriorModel,
    problem: &InverseProblem,
    cfg: &GuidanceConfig,
    solver: SolverKind,
    sched: &NoiseSchedule,
    seed: u64,
    oracle_mode: OracleMode,
) -> Result<(TensorGrid, SamplerTrace)> {
    let start = Instant::now();
    let n = sched.n_steps();
    let pairs = visit_pairs(solver, n)?;
    let run_stream = RandomStream::new(seed);
    let mut x = run_stream.child("init", 0).standard_normal(model.shape());
    let mut records = Vec::with_capacity(pairs.len());

    for (ordinal, &(i, i_prev)) in pairs.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFiniteState { step: i });
        }
        let step_stream = run_stream.child("step", i as u64);
        let eps_drift = model.epsilon(&x, i, sched)?.scale(-1.0);

        let (s_tilde, mu) = match cfg.estimator {
            Estimator::Dpg => {
                let (s, state) = dpg_score(
                    model,
                    problem,
                    &x,
                    i,
                    sched,
                    cfg,
                    step_stream.child("guidance", 0),
                )?;
                (s, state.mu)
            }
            Estimator::Dps => {
                let s = dps_score(model, problem, &x, i, sched)?;
                (s, model.tweedie_mean(&x, i, sched)?)
            }
            Estimator::Oracle => {
                let s = exact_guidance_for(model, problem, &x, i, sched)?;
                (s, model.tweedie_mean(&x, i, sched)?)
            }
        };

        let s_combined = match cfg.estimator {
            // The exact conditional score needs no norm budget: ε + guidance
            // is already the exact combined score.
            Estimator::Oracle => eps_drift.add(&s_tilde)?,
            _ => rescale_and_combine(&eps_drift, &s_tilde, cfg)?,
        };

        let cos_oracle = match (oracle_mode, cfg.estimator) {
            (OracleMode::Off, _) => None,
            (OracleMode::Trace, Estimator::Oracle) => Some(1.0),
            (OracleMode::Trace, _) => {
                let exact = exact_guidance_for(model, problem, &x, i, sched)?;
                Some(direction_accuracy(&s_tilde, &exact)?)
            }
        };
        let residual = problem.y.sub(&problem.apply(&mu)?)?;
        let d: usize = problem.x_shape.iter().product();
        let recon_l2 = residual.norm2();
        records.push(TraceRecord {
            step: ordinal,
            i,
            r_i: (recon_l2 * recon_l2 / d as f64).sqrt().max(cfg.r_floor),
            recon_l2,
            s_tilde_norm: s_tilde.norm2(),
            cos_oracle,
        });

        x = match solver {
            SolverKind::Ddpm => {
                ddpm_step(&x, &s_combined, i, sched, step_stream.child("noise", 0))?
            }
            SolverKind::Ddim { .. } => {
                // The skip update consumes noise convention: negate the drift.
                ddim_step(&x, &s_combined.scale(-1.0), i, i_prev, sched)?
            }
        };
    }

    if !x.is_finite() {
        return Err(Error::NonFiniteState { step: 0 });
    }
    let trace = SamplerTrace {
        records,
        x0: x.clone(),
        wall: start.elapsed(),
    };
    Ok((x, trace))
}
