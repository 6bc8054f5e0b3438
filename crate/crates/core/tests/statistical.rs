//! Distribution-level behavior of the guided sampler: the guidance-off limit
//! must reproduce the prior, and the Monte Carlo estimator must improve with
//! its sample budget.

use dpg_core::corpus::{eight_atom_masking, two_atom_line};
use dpg_core::guidance::{dpg_score, Estimator, GuidanceConfig};
use dpg_core::oracle::{direction_accuracy, exact_guidance_for};
use dpg_core::rng::RandomStream;
use dpg_core::sampler::{solve_inverse, OracleMode, SolverKind};
use dpg_core::schedule::{default_schedule, diffuse_sample};
use dpg_core::tensor::TensorGrid;

/// With a zero guidance budget the sampler is unconditional, so atom
/// frequencies must match the prior weights.
#[test]
fn zero_guidance_norm_reproduces_the_prior_weights() {
    let bench = two_atom_line();
    let sched = default_schedule();
    let cfg = GuidanceConfig {
        estimator: Estimator::Dps,
        guidance_norm: 0.0,
        ..GuidanceConfig::default()
    };
    let runs = 2000u64;
    let mut plus = 0usize;
    for seed in 0..runs {
        let (x0, _) = solve_inverse(
            &bench.prior,
            &bench.problem,
            &cfg,
            SolverKind::Ddpm,
            &sched,
            seed,
            OracleMode::Off,
        )
        .unwrap();
        if x0.data()[0] > 0.0 {
            plus += 1;
        }
    }
    let freq = plus as f64 / runs as f64;
    println!("unconditional +1 frequency: {freq}");
    assert!(
        (freq - 0.5).abs() <= 0.03,
        "unconditional frequency {freq} departs from the 0.5 prior weight"
    );
}

/// With a zero guidance budget the estimator choice cannot matter: the
/// trajectories agree bitwise because the noise streams are shared.
#[test]
fn zero_guidance_norm_makes_estimators_interchangeable() {
    let bench = two_atom_line();
    let sched = default_schedule();
    let run = |estimator: Estimator, seed: u64| {
        let cfg = GuidanceConfig {
            estimator,
            n_mc: 4,
            guidance_norm: 0.0,
            ..GuidanceConfig::default()
        };
        solve_inverse(
            &bench.prior,
            &bench.problem,
            &cfg,
            SolverKind::Ddpm,
            &sched,
            seed,
            OracleMode::Off,
        )
        .unwrap()
        .0
    };
    for seed in [1, 17, 123] {
        assert_eq!(run(Estimator::Dpg, seed), run(Estimator::Dps, seed));
    }
}

/// More Monte Carlo samples give a better direction: the mean cosine against
/// the exact guidance is non-decreasing over a 100×, 1000×, 10000× budget.
#[test]
fn dpg_direction_improves_with_the_sample_budget() {
    let bench = eight_atom_masking();
    let sched = default_schedule();
    let i = 800;
    let states = 20u64;
    let root = RandomStream::new(5150);

    let x_states: Vec<TensorGrid> = (0..states)
        .map(|k| {
            let x0 = bench.prior.sample(root.child("x0", k));
            diffuse_sample(&x0, i, &sched, root.child("noise", k)).unwrap()
        })
        .collect();
    let exact: Vec<TensorGrid> = x_states
        .iter()
        .map(|x| exact_guidance_for(&bench.prior, &bench.problem, x, i, &sched).unwrap())
        .collect();

    let mean_cosine = |n_mc: usize| -> f64 {
        let cfg = GuidanceConfig {
            n_mc,
            ..GuidanceConfig::default()
        };
        let total: f64 = x_states
            .iter()
            .zip(&exact)
            .enumerate()
            .map(|(k, (x, ex))| {
                let (s, _) = dpg_score(
                    &bench.prior,
                    &bench.problem,
                    x,
                    i,
                    &sched,
                    &cfg,
                    root.child("mc", (n_mc * states as usize + k) as u64),
                )
                .unwrap();
                direction_accuracy(&s, ex).unwrap()
            })
            .sum();
        total / states as f64
    };

    let c100 = mean_cosine(100);
    let c1000 = mean_cosine(1000);
    let c10000 = mean_cosine(10_000);
    println!("mean cosine at n_mc 100/1000/10000: {c100} {c1000} {c10000}");
    assert!(
        c100 <= c1000 && c1000 <= c10000,
        "cosine sequence not improving: {c100} {c1000} {c10000}"
    );
    assert!(
        c10000 > 0.5,
        "largest budget still badly misaligned: {c10000}"
    );
}
