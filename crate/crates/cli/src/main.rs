//! `dpg` — command-line driver for the guided diffusion posterior sampling
//! laboratory. Subcommands synthesize problems, run seeded experiments,
//! compare estimator directions against the exact guidance, sweep parameter
//! grids, and verify the closed-form invariants.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpg_core::config::{CompareConfig, ExperimentConfig};
use dpg_core::experiment::{
    compare_csv, compare_estimators, make_problem, oracle_check, run_experiment, sweep, sweep_csv,
    write_problem_files,
};
use dpg_core::Error;

#[derive(Parser)]
#[command(
    name = "dpg",
    version,
    about = "Laboratory for noisy inverse problems via guided diffusion posterior sampling"
)]
struct Cli {
    /// Experiment configuration JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Comma-separated seed list overriding the configured seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,

    /// Output directory overriding the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the inverse problem: ground truth, observation, descriptor.
    MakeProblem,
    /// Run the configured experiment over all seeds and write the report.
    Run,
    /// Score estimator directions against the exact guidance on
    /// forward-process states and write the accuracy table.
    Compare,
    /// Run the invariant checks over the closed forms.
    OracleCheck,
    /// Run the configured grid sweep over n_mc, guidance_norm, and sigma_y.
    Sweep,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("this subcommand needs --config PATH".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seeds) = &cli.seed {
        cfg.seeds = seeds.clone();
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::MakeProblem => {
            let cfg = load_config(cli)?;
            let setup = make_problem(&cfg)?;
            write_problem_files(&cfg, &setup, &cfg.output_dir)?;
            println!(
                "wrote problem files to {} (y shape {:?}, clipped rates {})",
                cfg.output_dir.display(),
                setup.problem.y.shape(),
                setup.clipped_rates
            );
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let report = run_experiment(&cfg)?;
            println!("report: {}", cfg.output_dir.join("report.json").display());
            println!(
                "seeds succeeded {} failed {}",
                report.aggregate.succeeded, report.aggregate.failed
            );
            println!(
                "psnr_db mean {} std {}",
                report.aggregate.psnr_db.mean, report.aggregate.psnr_db.std
            );
            println!(
                "recon_loss mean {} std {}",
                report.aggregate.recon_loss.mean, report.aggregate.recon_loss.std
            );
            if let Some(tv) = report.tv_distance {
                println!("tv_distance {tv}");
            }
        }
        Command::Compare => {
            let cfg = load_config(cli)?;
            let cmp = cfg.compare.clone().unwrap_or_else(|| CompareConfig {
                timestep_fracs: vec![0.95, 0.9, 0.8],
                draws: 20,
                estimators: vec![
                    dpg_core::guidance::Estimator::Dpg,
                    dpg_core::guidance::Estimator::Dps,
                    dpg_core::guidance::Estimator::Oracle,
                ],
            });
            let setup = make_problem(&cfg)?;
            let sched = cfg.schedule.build()?;
            let rows = compare_estimators(
                &setup.prior,
                &setup.problem,
                &sched,
                &cfg.guidance,
                &cmp,
                cfg.seeds[0],
            )?;
            let csv = compare_csv(&rows);
            fs::create_dir_all(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join("compare.csv"), &csv)?;
            print!("{csv}");
        }
        Command::OracleCheck => {
            let results = oracle_check()?;
            let mut failed = 0;
            for r in &results {
                let mark = if r.passed { "PASS" } else { "FAIL" };
                println!("{mark} {} — {}", r.name, r.detail);
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::InvalidConfig(format!(
                    "{failed} invariant check(s) failed"
                )));
            }
        }
        Command::Sweep => {
            let cfg = load_config(cli)?;
            let rows = sweep(&cfg)?;
            let csv = sweep_csv(&rows);
            fs::create_dir_all(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
