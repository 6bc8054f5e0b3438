//! Manual calibration sweeps used to pick the guidance-norm defaults frozen
//! into the acceptance tests. Run by hand with:
//!
//! ```text
//! cargo test -p dpg-core --test calibration -- --ignored --nocapture
//! ```

use std::time::Instant;

use dpg_core::corpus::{toy_inpainting, two_atom_line};
use dpg_core::guidance::{Estimator, GuidanceConfig, RescaleConvention};
use dpg_core::oracle::exact_posterior_atoms;
use dpg_core::oracle::posterior_tv_distance;
use dpg_core::prior::PriorModel;
use dpg_core::sampler::{solve_inverse, OracleMode, SolverKind};
use dpg_core::schedule::default_schedule;

/// Runs the two-atom benchmark with the Monte Carlo estimator at n_mc = 500
/// over a guidance-norm grid, printing the total-variation distance and the
/// empirical weight of the +1 atom (exact posterior weight 0.6900). The
/// weight column is the informative one: it shows which side of the
/// unbiased crossing a B value sits on, while the TV column alone is easy
/// to misread through its sampling noise (±√(w(1−w)/runs), i.e. ±0.019 at
/// 600 runs and ±0.010 at 2000).
fn two_atom_weight_scan(b_grid: &[f64], runs: u64, rescale: RescaleConvention) {
    let bench = two_atom_line();
    let PriorModel::Atoms(prior) = &bench.prior else {
        panic!("two-atom benchmark uses a finite-atom prior");
    };
    let exact = exact_posterior_atoms(prior, &bench.problem).unwrap();
    let sched = default_schedule();

    for &b in b_grid {
        let cfg = GuidanceConfig {
            estimator: Estimator::Dpg,
            n_mc: 500,
            guidance_norm: b,
            rescale_convention: rescale,
            ..GuidanceConfig::default()
        };
        let start = Instant::now();
        let samples: Vec<_> = (0..runs)
            .map(|seed| {
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
            })
            .collect();
        let tv = posterior_tv_distance(&samples, &exact).unwrap();
        let w_plus =
            samples.iter().filter(|s| s.data()[0] > 0.0).count() as f64 / samples.len() as f64;
        println!(
            "B = {b:>4}: tv = {tv:.4}, empirical +atom weight = {w_plus:.4} (exact 0.6900) \
             over {runs} runs ({:.2} s)",
            start.elapsed().as_secs_f64(),
        );
    }
}

#[test]
#[ignore = "manual calibration sweep for the two-atom guidance norm"]
fn two_atom_tv_over_guidance_norm_grid() {
    two_atom_weight_scan(
        &[0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 5.5, 6.0, 6.5, 7.0, 8.0],
        600,
        RescaleConvention::UnitNorm,
    );
}

#[test]
#[ignore = "manual confirmation of the guidance-norm plateau at acceptance scale"]
fn two_atom_tv_confirmation_at_acceptance_scale() {
    two_atom_weight_scan(&[5.0, 5.2, 5.5, 5.8], 2000, RescaleConvention::UnitNorm);
}

/// Probe of the alternative rescale convention on the same benchmark. Under
/// `literal_sq_norm` the injected guidance magnitude is B/‖s̃‖, so the
/// meaningful B range differs from the unit-norm one by orders of magnitude;
/// this scans a log grid to locate it.
#[test]
#[ignore = "manual probe of the literal_sq_norm rescale on the two-atom benchmark"]
fn two_atom_tv_literal_sq_norm_probe() {
    two_atom_weight_scan(
        &[1e-3, 1e-2, 1e-1, 1.0, 10.0],
        300,
        RescaleConvention::LiteralSqNorm,
    );
}

#[test]
#[ignore = "manual calibration sweep for the inpainting guidance norm"]
fn inpainting_recon_at_early_step_over_guidance_norm_grid() {
    let bench = toy_inpainting();
    let sched = default_schedule();
    let seeds: Vec<u64> = (0..10).collect();

    // (n_mc, B) grid covering weak to saturated guidance and small to large
    // Monte Carlo budgets; the interesting readout is the sign of the
    // dpg-minus-dps gap in early reconstruction error.
    let grid = [
        (500usize, 5.0),
        (500, 10.0),
        (500, 20.0),
        (500, 50.0),
        (500, 100.0),
        (500, 200.0),
        (500, 400.0),
        (64, 100.0),
        (64, 200.0),
        (128, 200.0),
        (2000, 20.0),
    ];
    for &(n_mc, b) in &grid {
        let mut means = Vec::new();
        for estimator in [Estimator::Dpg, Estimator::Dps] {
            let cfg = GuidanceConfig {
                estimator,
                n_mc,
                guidance_norm: b,
                ..GuidanceConfig::default()
            };
            let start = Instant::now();
            let mut recon_sum = 0.0;
            for &seed in &seeds {
                let (_, trace) = solve_inverse(
                    &bench.prior,
                    &bench.problem,
                    &cfg,
                    SolverKind::Ddpm,
                    &sched,
                    seed,
                    OracleMode::Off,
                )
                .unwrap();
                let rec = trace
                    .records
                    .iter()
                    .find(|r| r.i == 900)
                    .expect("step 900 visited");
                recon_sum += rec.recon_l2;
            }
            let mean = recon_sum / seeds.len() as f64;
            means.push(mean);
            println!(
                "n_mc = {n_mc:>5} B = {b:>4} {:>6}: mean recon at i=900 over {} seeds = {mean:.4} ({:.2} s)",
                cfg.estimator.name(),
                seeds.len(),
                start.elapsed().as_secs_f64(),
            );
        }
        println!(
            "n_mc = {n_mc:>5} B = {b:>4}: dpg-minus-dps gap = {:+.4}",
            means[0] - means[1]
        );
    }
}
