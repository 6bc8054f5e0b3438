//! Experiment configuration: a single JSON document describing schedule,
//! prior, inverse problem, guidance, solver, seeds, and outputs. Everything
//! validates before any computation starts and round-trips byte-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{Estimator, GuidanceConfig};
use crate::sampler::SolverKind;
use crate::schedule::{build_linear_schedule, NoiseSchedule};

fn default_n_steps() -> usize {
    1000
}
fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    0.02
}
fn default_psnr_max() -> f64 {
    1.0
}
fn default_compare_draws() -> usize {
    20
}
fn default_compare_estimators() -> Vec<Estimator> {
    vec![Estimator::Dpg, Estimator::Dps, Estimator::Oracle]
}

/// Linear variance schedule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            n_steps: default_n_steps(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_linear_schedule(self.n_steps, self.beta_start, self.beta_end)
    }
}

/// Where the prior comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorConfig {
    /// The built-in 32-image procedural corpus as a uniform atom prior.
    ToyCorpus,
    /// Isotropic Gaussian prior with a constant mean fill.
    Gaussian {
        shape: Vec<usize>,
        #[serde(default)]
        mean: f64,
        variance: f64,
    },
    /// Directory of `.dpgt` atom tensors (sorted by file name), optionally
    /// weighted by a text file with one weight per line.
    AtomsDir {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<PathBuf>,
    },
}

/// Degradation operator specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorConfig {
    Identity,
    Inpaint { keep: Vec<usize> },
    AvgPool { factor: usize },
    GaussianBlur { size: usize, sigma: f64 },
    MotionBlur { length: usize, angle_deg: f64 },
    NonlinearBlur { size: usize, sigma: f64 },
    PhaseRetrieval,
}

/// Observation noise specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseConfig {
    Gaussian { sigma_y: f64 },
    Poisson { lambda: f64, intensity_scale: f64 },
}

/// Where the ground-truth signal comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum GroundTruthConfig {
    /// An atom of the configured prior by index.
    Atom { index: usize },
    /// A `.dpgt` tensor on disk.
    File { path: PathBuf },
    /// A draw from the prior with its own seed.
    PriorSample { seed: u64 },
}

/// Inverse-problem specification: operator, noise, ground truth, and the seed
/// used to synthesize the observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub operator: OperatorConfig,
    pub noise: NoiseConfig,
    pub ground_truth: GroundTruthConfig,
    pub synthesis_seed: u64,
}

/// Reverse-process solver selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverConfig {
    Ddpm,
    Ddim { steps: usize },
}

impl SolverConfig {
    pub fn to_kind(&self) -> SolverKind {
        match *self {
            SolverConfig::Ddpm => SolverKind::Ddpm,
            SolverConfig::Ddim { steps } => SolverKind::Ddim { steps },
        }
    }
}

/// Estimator-accuracy comparison settings: forward-process states are drawn
/// at each listed fraction of the schedule and every estimator's direction is
/// scored against the exact guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub timestep_fracs: Vec<f64>,
    #[serde(default = "default_compare_draws")]
    pub draws: usize,
    #[serde(default = "default_compare_estimators")]
    pub estimators: Vec<Estimator>,
}

/// Grid-sweep settings over estimator sample count, guidance norm, and
/// observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_mc: Vec<usize>,
    pub guidance_norm: Vec<f64>,
    pub sigma_y: Vec<f64>,
}

/// The complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub prior: PriorConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    pub solver: SolverConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_psnr_max")]
    pub psnr_max: f64,
    #[serde(default)]
    pub oracle_trace: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    /// Checks every declared invariant before any computation: parameter
    /// ranges, nonempty seed list, and existence of referenced files.
    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.guidance.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        if !(self.psnr_max.is_finite() && self.psnr_max > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "psnr_max must be a positive real, got {}",
                self.psnr_max
            )));
        }
        match &self.prior {
            PriorConfig::ToyCorpus => {}
            PriorConfig::Gaussian {
                shape, variance, ..
            } => {
                if shape.is_empty() || shape.iter().product::<usize>() == 0 {
                    return Err(Error::InvalidConfig("gaussian prior shape is empty".into()));
                }
                if !(variance.is_finite() && *variance > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "gaussian prior variance must be positive, got {variance}"
                    )));
                }
            }
            PriorConfig::AtomsDir { path, weights } => {
                if !path.is_dir() {
                    return Err(Error::InvalidConfig(format!(
                        "atoms directory {} does not exist",
                        path.display()
                    )));
                }
                if let Some(w) = weights {
                    if !w.is_file() {
                        return Err(Error::InvalidConfig(format!(
                            "weights file {} does not exist",
                            w.display()
                        )));
                    }
                }
            }
        }
        if let GroundTruthConfig::File { path } = &self.problem.ground_truth {
            if !path.is_file() {
                return Err(Error::InvalidConfig(format!(
                    "ground-truth file {} does not exist",
                    path.display()
                )));
            }
        }
        match &self.solver {
            SolverConfig::Ddpm => {}
            SolverConfig::Ddim { steps } => {
                if *steps == 0 {
                    return Err(Error::InvalidConfig(
                        "skip solver needs at least one step".into(),
                    ));
                }
            }
        }
        if let Some(cmp) = &self.compare {
            if cmp.timestep_fracs.is_empty() {
                return Err(Error::InvalidConfig(
                    "compare.timestep_fracs must be nonempty".into(),
                ));
            }
            if !cmp
                .timestep_fracs
                .iter()
                .all(|f| f.is_finite() && *f > 0.0 && *f <= 1.0)
            {
                return Err(Error::InvalidConfig(
                    "compare.timestep_fracs must lie in (0, 1]".into(),
                ));
            }
            if cmp.draws == 0 {
                return Err(Error::InvalidConfig("compare.draws must be >= 1".into()));
            }
            if cmp.estimators.is_empty() {
                return Err(Error::InvalidConfig(
                    "compare.estimators must be nonempty".into(),
                ));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.n_mc.is_empty() || sw.guidance_norm.is_empty() || sw.sigma_y.is_empty() {
                return Err(Error::InvalidConfig(
                    "sweep axes must all be nonempty".into(),
                ));
            }
            if sw.n_mc.contains(&0) {
                return Err(Error::InvalidConfig(
                    "sweep.n_mc entries must be >= 1".into(),
                ));
            }
            if !sw.guidance_norm.iter().all(|b| b.is_finite() && *b >= 0.0) {
                return Err(Error::InvalidConfig(
                    "sweep.guidance_norm entries must be nonnegative reals".into(),
                ));
            }
            if !sw.sigma_y.iter().all(|s| s.is_finite() && *s > 0.0) {
                return Err(Error::InvalidConfig(
                    "sweep.sigma_y entries must be positive reals".into(),
                ));
            }
        }
        Ok(())
    }

    /// Pretty-printed JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
