//! Built-in deterministic benchmarks: a 32-image procedural toy corpus and
//! ready-made inverse problems over finite-atom priors with known ground
//! truth, so the whole pipeline runs without external data.

use crate::operators::{synthesize_observation, DegradationOperator, InverseProblem, NoiseModel};
use crate::prior::{FiniteAtomPrior, PriorModel};
use crate::rng::RandomStream;
use crate::tensor::TensorGrid;

/// Toy image side length.
pub const TOY_SIDE: usize = 16;
/// Number of images in the built-in corpus.
pub const TOY_COUNT: usize = 32;

const ATOM_SEED: u64 = 271_828;
const OBS_SEED: u64 = 31_415;

fn toy_image(idx: usize) -> TensorGrid {
    let family = idx / 8;
    let v = idx % 8;
    let side = TOY_SIDE;
    let mut data = Vec::with_capacity(side * side);
    match family {
        // Axis-aligned stripes with varying period and orientation.
        0 => {
            let period = 2 + (v % 4);
            let horizontal = v < 4;
            for h in 0..side {
                for w in 0..side {
                    let coord = if horizontal { h } else { w };
                    let band = (coord / period) % 2;
                    data.push(0.15 + 0.7 * band as f64);
                }
            }
        }
        // Checkerboards with varying cell size and phase.
        1 => {
            let cell = 1 + (v % 4);
            let phase = v / 4;
            for h in 0..side {
                for w in 0..side {
                    let parity = (h / cell + w / cell + phase) % 2;
                    data.push(0.1 + 0.8 * parity as f64);
                }
            }
        }
        // Concentric rings of varying wavelength and phase.
        2 => {
            let wavelength = 2.5 + 0.8 * v as f64;
            let phase = 0.3 * v as f64;
            let c = (side as f64 - 1.0) / 2.0;
            for h in 0..side {
                for w in 0..side {
                    let r = ((h as f64 - c).powi(2) + (w as f64 - c).powi(2)).sqrt();
                    let t = std::f64::consts::TAU * r / wavelength + phase;
                    data.push(0.5 + 0.45 * t.cos());
                }
            }
        }
        // Linear ramps at varying angles, normalized to span [0,1].
        _ => {
            let theta = std::f64::consts::PI * v as f64 / 8.0;
            let (sin, cos) = theta.sin_cos();
            let raw: Vec<f64> = (0..side * side)
                .map(|k| (k % side) as f64 * cos + (k / side) as f64 * sin)
                .collect();
            let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            data.extend(raw.iter().map(|r| (r - lo) / (hi - lo)));
        }
    }
    TensorGrid::new(vec![1, side, side], data).expect("toy image dimensions are fixed")
}

/// The 32 deterministic single-channel 16×16 images (stripes, checkerboards,
/// rings, ramps), all with values in [0,1].
pub fn toy_corpus() -> Vec<TensorGrid> {
    (0..TOY_COUNT).map(toy_image).collect()
}

/// Uniform finite-atom prior over the toy corpus.
pub fn toy_prior() -> FiniteAtomPrior {
    FiniteAtomPrior::uniform(toy_corpus()).expect("corpus atoms are valid")
}

/// A ready-made inverse problem with its prior and ground truth.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub prior: PriorModel,
    pub problem: InverseProblem,
    pub ground_truth: TensorGrid,
}

/// Two atoms at ±1 on the line, identity observation with σ_y = 0.5 and the
/// fixed observation y = 0.1. The exact posterior puts weight
/// 1/(1+e^{−0.8}) ≈ 0.68997 on the +1 atom.
pub fn two_atom_line() -> Benchmark {
    let plus = TensorGrid::vector(vec![1.0]).expect("nonempty");
    let minus = TensorGrid::vector(vec![-1.0]).expect("nonempty");
    let prior = FiniteAtomPrior::uniform(vec![plus.clone(), minus]).expect("valid atoms");
    let problem = InverseProblem::new(
        DegradationOperator::identity(),
        NoiseModel::gaussian(0.5).expect("positive sigma"),
        TensorGrid::vector(vec![0.1]).expect("nonempty"),
        vec![1],
    )
    .expect("valid problem");
    Benchmark {
        prior: PriorModel::Atoms(prior),
        problem,
        ground_truth: plus,
    }
}

/// Eight seeded standard-normal atoms in d = 16 observed through a selection
/// operator keeping the even coordinates, σ_y = 0.05; ground truth is atom 0
/// and the observation is drawn once with a fixed seed.
pub fn eight_atom_masking() -> Benchmark {
    let root = RandomStream::new(ATOM_SEED);
    let atoms: Vec<TensorGrid> = (0..8)
        .map(|k| root.child("atom", k).standard_normal(&[16]))
        .collect();
    let ground_truth = atoms[0].clone();
    let prior = FiniteAtomPrior::uniform(atoms).expect("valid atoms");
    let keep: Vec<usize> = (0..16).step_by(2).collect();
    let operator = DegradationOperator::inpaint(keep, vec![16]).expect("valid keep set");
    let noise = NoiseModel::gaussian(0.05).expect("positive sigma");
    let synthesis = synthesize_observation(
        operator,
        noise,
        &ground_truth,
        RandomStream::new(OBS_SEED).child("mask16", 0),
    )
    .expect("synthesis over a valid operator");
    Benchmark {
        prior: PriorModel::Atoms(prior),
        problem: synthesis.problem,
        ground_truth,
    }
}

/// 16×16 inpainting over the toy-corpus prior: a checkerboard mask keeps the
/// 128 pixels with even (row+column) parity, σ_y = 0.05; ground truth is
/// corpus image 0 and the observation is drawn once with a fixed seed.
pub fn toy_inpainting() -> Benchmark {
    let corpus = toy_corpus();
    let ground_truth = corpus[0].clone();
    let prior = FiniteAtomPrior::uniform(corpus).expect("valid atoms");
    let keep: Vec<usize> = (0..TOY_SIDE * TOY_SIDE)
        .filter(|k| (k / TOY_SIDE + k % TOY_SIDE).is_multiple_of(2))
        .collect();
    let operator =
        DegradationOperator::inpaint(keep, vec![1, TOY_SIDE, TOY_SIDE]).expect("valid keep set");
    let noise = NoiseModel::gaussian(0.05).expect("positive sigma");
    let synthesis = synthesize_observation(
        operator,
        noise,
        &ground_truth,
        RandomStream::new(OBS_SEED).child("inpaint", 0),
    )
    .expect("synthesis over a valid operator");
    Benchmark {
        prior: PriorModel::Atoms(prior),
        problem: synthesis.problem,
        ground_truth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exact_posterior_atoms;
    use approx::assert_abs_diff_eq;

    #[test]
    fn corpus_has_32_unit_range_images() {
        let corpus = toy_corpus();
        assert_eq!(corpus.len(), TOY_COUNT);
        for img in &corpus {
            assert_eq!(img.shape(), &[1, TOY_SIDE, TOY_SIDE]);
            assert!(img
                .data()
                .iter()
                .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn corpus_images_are_pairwise_distinct() {
        let corpus = toy_corpus();
        for a in 0..corpus.len() {
            for b in (a + 1)..corpus.len() {
                let gap = corpus[a].sub(&corpus[b]).unwrap().norm2();
                assert!(gap > 1e-6, "images {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        assert_eq!(toy_corpus(), toy_corpus());
    }

    #[test]
    fn two_atom_posterior_weight_matches_the_logistic_form() {
        let bench = two_atom_line();
        let PriorModel::Atoms(prior) = &bench.prior else {
            panic!("two-atom benchmark uses a finite-atom prior");
        };
        let post = exact_posterior_atoms(prior, &bench.problem).unwrap();
        // ln w₊/w₋ = ((y+1)² − (y−1)²)/(2σ_y²) = 2y/σ_y² = 0.8.
        assert_abs_diff_eq!(post.weights()[0], 0.6899744811276125, epsilon = 1e-12);
        assert_abs_diff_eq!(
            post.weights()[0],
            1.0 / (1.0 + (-0.8f64).exp()),
            epsilon = 1e-15
        );
    }

    #[test]
    fn masking_benchmark_observes_eight_coordinates() {
        let bench = eight_atom_masking();
        assert_eq!(bench.problem.y.shape(), &[8]);
        assert_eq!(bench.ground_truth.shape(), &[16]);
        // The observation stays close to the masked ground truth at σ_y=0.05.
        let ax = bench.problem.apply(&bench.ground_truth).unwrap();
        let gap = bench.problem.y.sub(&ax).unwrap().norm2();
        assert!(gap < 0.05 * 8.0, "observation noise out of scale: {gap}");
        assert_eq!(eight_atom_masking().problem.y, bench.problem.y);
    }

    #[test]
    fn inpainting_benchmark_keeps_half_the_pixels() {
        let bench = toy_inpainting();
        assert_eq!(bench.problem.y.shape(), &[TOY_SIDE * TOY_SIDE / 2]);
        assert_eq!(bench.ground_truth.shape(), &[1, TOY_SIDE, TOY_SIDE]);
        assert_eq!(toy_inpainting().problem.y, bench.problem.y);
    }
}
