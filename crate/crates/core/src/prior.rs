//! Priors with closed-form marginal scores under the forward process.
//!
//! For a prior p(x_0) the noisy marginal is p_i(x_i) = ∫ N(x_i; √ᾱ_i·x_0,
//! (1−ᾱ_i)I) p(x_0) dx_0. A [`ScoreModel`] exposes ∇log p_i, the
//! noise-prediction form ε_i = −σ_i·∇log p_i, the posterior mean
//! E[x_0 | x_i] (Tweedie), and vector-Jacobian products of that mean.

use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::TensorGrid;

/// A prior whose noisy marginals admit score evaluation.
pub trait ScoreModel {
    /// Shape of the clean signal x_0.
    fn shape(&self) -> &[usize];

    /// ∇_{x} log p_i(x) for 1 ≤ i ≤ N.
    fn marginal_score(&self, x: &TensorGrid, i: usize, sched: &NoiseSchedule)
        -> Result<TensorGrid>;

    /// Noise prediction ε_i(x) = −σ_i·∇log p_i(x).
    fn epsilon(&self, x: &TensorGrid, i: usize, sched: &NoiseSchedule) -> Result<TensorGrid> {
        let s = self.marginal_score(x, i, sched)?;
        Ok(s.scale(-sched.sigma(i)))
    }

    /// Posterior mean μ_i(x) = E[x_0 | x_i = x] = (x + (1−ᾱ_i)·∇log p_i(x))/√ᾱ_i.
    fn tweedie_mean(&self, x: &TensorGrid, i: usize, sched: &NoiseSchedule) -> Result<TensorGrid> {
        let s = self.marginal_score(x, i, sched)?;
        let v = 1.0 - sched.alpha_bar(i);
        Ok(x.add_scaled(&s, v)?.scale(1.0 / sched.alpha_bar(i).sqrt()))
    }

    /// (∂μ_i/∂x)ᵀ·v. The default is a central finite difference of
    /// x ↦ ⟨v, μ_i(x)⟩; concrete priors override it with exact expressions.
    fn tweedie_vjp(
        &self,
        x: &TensorGrid,
        i: usize,
        sched: &NoiseSchedule,
        v: &TensorGrid,
    ) -> Result<TensorGrid> {
        if v.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                expected: x.shape().to_vec(),
                got: v.shape().to_vec(),
            });
        }
        let h = 1e-4 * (1.0 + x.linf());
        let mut grad = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let fp = self.tweedie_mean(&xp, i, sched)?.dot(v)?;
            let fm = self.tweedie_mean(&xm, i, sched)?.dot(v)?;
            grad.push((fp - fm) / (2.0 * h));
        }
        TensorGrid::new(x.shape().to_vec(), grad)
    }
}

fn validate_state(shape: &[usize], x: &TensorGrid, i: usize, sched: &NoiseSchedule) -> Result<()> {
    if x.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape.to_vec(),
            got: x.shape().to_vec(),
        });
    }
    if i == 0 || i > sched.n_steps() {
        return Err(Error::StepOutOfRange {
            step: i,
            n_steps: sched.n_steps(),
        });
    }
    Ok(())
}

/// Discrete mixture prior p(x_0) = Σ_k w_k·δ(x_0 − a_k).
///
/// Noisy marginals are Gaussian mixtures, so responsibilities, scores, the
/// posterior mean, and its Jacobian all have closed forms.
#[derive(Debug, Clone)]
pub struct FiniteAtomPrior {
    atoms: Vec<TensorGrid>,
    weights: Vec<f64>,
    shape: Vec<usize>,
}

impl FiniteAtomPrior {
    /// Builds a mixture from atoms and strictly positive weights; weights are
    /// normalized to sum to one.
    pub fn new(atoms: Vec<TensorGrid>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidPrior("no atoms".into()));
        }
        if weights.len() != atoms.len() {
            return Err(Error::InvalidPrior(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let shape = atoms[0].shape().to_vec();
        if let Some(bad) = atoms.iter().find(|a| a.shape() != shape) {
            return Err(Error::InvalidPrior(format!(
                "atom shape {:?} differs from {:?}",
                bad.shape(),
                shape
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidPrior("weights must be finite and > 0".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self {
            atoms,
            weights,
            shape,
        })
    }

    /// Uniform mixture over the given atoms.
    pub fn uniform(atoms: Vec<TensorGrid>) -> Result<Self> {
        let n = atoms.len();
        Self::new(atoms, vec![1.0; n.max(1)])
    }

    pub fn atoms(&self) -> &[TensorGrid] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mixture responsibilities γ_k(x, i) ∝ w_k·exp(−‖x − √ᾱ_i·a_k‖²/(2(1−ᾱ_i))).
    ///
    /// At i = 0 the marginal is the discrete prior itself: x must coincide
    /// with an atom exactly, and the mass lands on the matching atoms.
    pub fn responsibilities(
        &self,
        x: &TensorGrid,
        i: usize,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        if x.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        sched.validate_step(i)?;
        if i == 0 {
            let mut gamma = vec![0.0; self.atoms.len()];
            let mut mass = 0.0;
            for (k, a) in self.atoms.iter().enumerate() {
                if a == x {
                    gamma[k] = self.weights[k];
                    mass += self.weights[k];
                }
            }
            if mass == 0.0 {
                return Err(Error::DegenerateResponsibilities);
            }
            for g in &mut gamma {
                *g /= mass;
            }
            return Ok(gamma);
        }
        let root_ab = sched.alpha_bar(i).sqrt();
        let var = 1.0 - sched.alpha_bar(i);
        let logits: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.weights)
            .map(|(a, w)| {
                let d2 = x
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(xi, ai)| {
                        let d = xi - root_ab * ai;
                        d * d
                    })
                    .sum::<f64>();
                w.ln() - d2 / (2.0 * var)
            })
            .collect();
        let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut gamma: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = gamma.iter().sum();
        for g in &mut gamma {
            *g /= total;
        }
        Ok(gamma)
    }

    /// Posterior-mean helper Σ_k γ_k·a_k for precomputed responsibilities.
    fn mixture_mean(&self, gamma: &[f64]) -> TensorGrid {
        let mut mean = TensorGrid::zeros(&self.shape);
        for (g, a) in gamma.iter().zip(&self.atoms) {
            mean.axpy(*g, a)
                .expect("atom shapes validated at construction");
        }
        mean
    }

    /// Draws an atom index proportional to the weights.
    pub fn sample(&self, stream: RandomStream) -> TensorGrid {
        let u = stream.uniform();
        let mut acc = 0.0;
        for (w, a) in self.weights.iter().zip(&self.atoms) {
            acc += w;
            if u < acc {
                return a.clone();
            }
        }
        self.atoms.last().expect("atoms nonempty").clone()
    }
}

impl ScoreModel for FiniteAtomPrior {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// ∇log p_i(x) = (√ᾱ_i·Σ_k γ_k·a_k − x)/(1−ᾱ_i).
    fn marginal_score(
        &self,
        x: &TensorGrid,
        i: usize,
        sched: &NoiseSchedule,
    ) -> Result<TensorGrid> {
        validate_state(&self.shape, x, i, sched)?;
        let gamma = self.responsibilities(x, i, sched)?;
        let var = 1.0 - sched.alpha_bar(i);
        Ok(self
            .mixture_mean(&gamma)
            .scale(sched.alpha_bar(i).sqrt())
            .sub(x)?
            .scale(1.0 / var))
    }

    /// E[x_0 | x_i] = Σ_k γ_k·a_k.
    fn tweedie_mean(&self, x: &TensorGrid, i: usize, sched: &NoiseSchedule) -> Result<TensorGrid> {
        validate_state(&self.shape, x, i, sched)?;
        let gamma = self.responsibilities(x, i, sched)?;
        Ok(self.mixture_mean(&gamma))
    }

    /// (∂μ/∂x)ᵀv = (√ᾱ_i/(1−ᾱ_i))·(Σ_k γ_k⟨a_k,v⟩a_k − ⟨μ,v⟩μ): the Jacobian
    /// is the responsibility-weighted covariance of the atoms (symmetric).
    fn tweedie_vjp(
        &self,
        x: &TensorGrid,
        i: usize,
        sched: &NoiseSchedule,
        v: &TensorGrid,
    ) -> Result<TensorGrid> {
        validate_state(&self.shape, x, i, sched)?;
        if v.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: v.shape().to_vec(),
            });
        }
        let gamma = self.responsibilities(x, i, sched)?;
        let mu = self.mixture_mean(&gamma);
        let mut out = TensorGrid::zeros(&self.shape);
        for (g, a) in gamma.iter().zip(&self.atoms) {
            out.axpy(g * a.dot(v)?, a)?;
        }
        out.axpy(-mu.dot(v)?, &mu)?;
        let var = 1.0 - sched.alpha_bar(i);
        Ok(out.scale(sched.alpha_bar(i).sqrt() / var))
    }
}

/// Gaussian prior p(x_0) = N(m, τ²·I); every quantity is linear in x.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: TensorGrid,
    variance: f64,
}

impl GaussianPrior {
    pub fn new(mean: TensorGrid, variance: f64) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::InvalidPrior(format!(
                "variance must be finite and > 0, got {variance}"
            )));
        }
        Ok(Self { mean, variance })
    }

    /// N(0, I) over the given shape.
    pub fn standard(shape: &[usize]) -> Self {
        Self {
            mean: TensorGrid::zeros(shape),
            variance: 1.0,
        }
    }

    pub fn mean(&self) -> &TensorGrid {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Marginal variance of x_i: D_i = ᾱ_i·τ² + (1−ᾱ_i).
    fn marginal_variance(&self, i: usize, sched: &NoiseSchedule) -> f64 {
        sched.alpha_bar(i) * self.variance + (1.0 - sched.alpha_bar(i))
    }

    pub fn sample(&self, stream: RandomStream) -> TensorGrid {
        let z = stream.standard_normal(self.mean.shape());
        self.mean
            .add_scaled(&z, self.variance.sqrt())
            .expect("shapes match by construction")
    }
}

impl ScoreModel for GaussianPrior {
    fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    /// ∇log p_i(x) = −(x − √ᾱ_i·m)/D_i with D_i = ᾱ_i·τ² + (1−ᾱ_i).
    fn marginal_score(
        &self,
        x: &TensorGrid,
        i: usize,
        sched: &NoiseSchedule,
    ) -> Result<TensorGrid> {
        validate_state(self.mean.shape(), x, i, sched)?;
        let d = self.marginal_variance(i, sched);
        Ok(x.sub(&self.mean.scale(sched.alpha_bar(i).sqrt()))?
            .scale(-1.0 / d))
    }

    /// E[x_0 | x_i] = (√ᾱ_i·τ²/D_i)·x + ((1−ᾱ_i)/D_i)·m.
    fn tweedie_mean(&self, x: &TensorGrid, i: usize, sched: &NoiseSchedule) -> Result<TensorGrid> {
        validate_state(self.mean.shape(), x, i, sched)?;
        let d = self.marginal_variance(i, sched);
        let gain = sched.alpha_bar(i).sqrt() * self.variance / d;
        x.scale(gain)
            .add_scaled(&self.mean, (1.0 - sched.alpha_bar(i)) / d)
    }

    /// The posterior-mean map is linear with symmetric Jacobian
    /// (√ᾱ_i·τ²/D_i)·I, so the VJP is a rescaling of v.
    fn tweedie_vjp(
        &self,
        x: &TensorGrid,
        i: usize,
        sched: &NoiseSchedule,
        v: &TensorGrid,
    ) -> Result<TensorGrid> {
        validate_state(self.mean.shape(), x, i, sched)?;
        if v.shape() != self.mean.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.mean.shape().to_vec(),
                got: v.shape().to_vec(),
            });
        }
        let d = self.marginal_variance(i, sched);
        Ok(v.scale(sched.alpha_bar(i).sqrt() * self.variance / d))
    }
}

/// Closed union of the supported priors; dispatches [`ScoreModel`] calls and
/// prior sampling.
#[derive(Debug, Clone)]
pub enum PriorModel {
    Atoms(FiniteAtomPrior),
    Gaussian(GaussianPrior),
}

impl PriorModel {
    pub fn sample(&self, stream: RandomStream) -> TensorGrid {
        match self {
            PriorModel::Atoms(p) => p.sample(stream),
            PriorModel::Gaussian(p) => p.sample(stream),
        }
    }
}

impl ScoreModel for PriorModel {
    fn shape(&self) -> &[usize] {
        match self {
            PriorModel::Atoms(p) => p.shape(),
            PriorModel::Gaussian(p) => p.shape(),
        }
    }

    fn marginal_score(
        &self,
        x: &TensorGrid,
        i: usize,
        sched: &NoiseSchedule,
    ) -> Result<TensorGrid> {
        match self {
            PriorModel::Atoms(p) => p.marginal_score(x, i, sched),
            PriorModel::Gaussian(p) => p.marginal_score(x, i, sched),
        }
    }

    fn epsilon(&self, x: &TensorGrid, i: usize, sched: &NoiseSchedule) -> Result<TensorGrid> {
        match self {
            PriorModel::Atoms(p) => p.epsilon(x, i, sched),
            PriorModel::Gaussian(p) => p.epsilon(x, i, sched),
        }
    }

    fn tweedie_mean(&self, x: &TensorGrid, i: usize, sched: &NoiseSchedule) -> Result<TensorGrid> {
        match self {
            PriorModel::Atoms(p) => p.tweedie_mean(x, i, sched),
            PriorModel::Gaussian(p) => p.tweedie_mean(x, i, sched),
        }
    }

    fn tweedie_vjp(
        &self,
        x: &TensorGrid,
        i: usize,
        sched: &NoiseSchedule,
        v: &TensorGrid,
    ) -> Result<TensorGrid> {
        match self {
            PriorModel::Atoms(p) => p.tweedie_vjp(x, i, sched, v),
            PriorModel::Gaussian(p) => p.tweedie_vjp(x, i, sched, v),
        }
    }
}
