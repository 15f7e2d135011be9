//! Command-line harness: scenario runs (Monte Carlo or expected mode),
//! rate-vs-loss sweeps, source-parameter optimization and the closed-loop
//! frequency-calibration demo.
//!
//! The worker count of parallel stages follows the TFQKD_WORKERS
//! environment variable (default: all cores).

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tfqkd_core::keyrate::{optimize_source_params, OptimizerConfig};
use tfqkd_core::scenario::{load_scenario, run_calibration_demo, run_scenario, sweep_loss, Mode};

#[derive(Parser)]
#[command(name = "tfqkd", about = "Free-space twin-field QKD simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario end to end and write its report and traces.
    Run {
        /// Scenario TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (reports/, traces/, sweeps/ inside).
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario mode (monte_carlo | expected).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Expected-mode key rate across a grid of total losses.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Grid start, dB.
        #[arg(long, default_value_t = 10.0)]
        from_db: f64,
        /// Grid end, dB.
        #[arg(long, default_value_t = 90.0)]
        to_db: f64,
        /// Grid step, dB.
        #[arg(long, default_value_t = 2.0)]
        step_db: f64,
    },
    /// Optimize the source intensities/probabilities for the scenario's
    /// conditions.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-loop frequency-calibration demonstration.
    CalibrateDemo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        rounds: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var("TFQKD_WORKERS") {
        let workers: usize = v
            .parse()
            .with_context(|| format!("TFQKD_WORKERS = {v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("failed to size the worker pool")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    init_workers()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out_dir,
            seed,
            mode,
        } => {
            let mut scenario = load_scenario(&config)?;
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            if let Some(mode) = mode {
                scenario.mode = match mode.as_str() {
                    "monte_carlo" => Mode::MonteCarlo,
                    "expected" => Mode::Expected,
                    other => anyhow::bail!("unknown mode {other:?}"),
                };
            }
            let report = run_scenario(&scenario, &out_dir)?;
            print!("{}", report.render_text());
            println!(
                "\nreport written to {}",
                out_dir.join("reports").join(format!("{}.txt", scenario.name)).display()
            );
        }
        Command::Sweep {
            config,
            out_dir,
            from_db,
            to_db,
            step_db,
        } => {
            let scenario = load_scenario(&config)?;
            anyhow::ensure!(step_db > 0.0 && to_db >= from_db, "bad sweep grid");
            let mut grid = Vec::new();
            let mut loss = from_db;
            while loss <= to_db + 1e-9 {
                grid.push(loss);
                loss += step_db;
            }
            let rows = sweep_loss(&scenario, &grid, &out_dir)?;
            println!("total_loss_db  rate(qx=0.07)  rate(qx=0.14)  plob");
            for r in rows {
                println!(
                    "{:>8.2}       {:>11.4e}   {:>11.4e}   {:>11.4e}",
                    r.total_loss_db, r.rate_qx_low, r.rate_qx_high, r.plob
                );
            }
        }
        Command::Optimize { config, seed } => {
            let scenario = load_scenario(&config)?;
            let cfg = OptimizerConfig {
                lambda: scenario.postselection.lambda,
                sigma_phase: scenario.sigma_phase,
                seed: seed.unwrap_or(scenario.seed),
                ..OptimizerConfig::default()
            };
            let mut cond = scenario.conditions;
            cond.n_pairs = scenario.total_pairs();
            let (params, rate) = optimize_source_params(&cond, &cfg)?;
            println!("optimized source parameters:");
            println!("  mu_x = {:.4}   mu_y = {:.4}   mu_z = {:.4}", params.mu_x, params.mu_y, params.mu_z);
            println!(
                "  p_x  = {:.4}   p_y  = {:.4}   p_z  = {:.4}   (p_v = {:.4})",
                params.p_x,
                params.p_y,
                params.p_z,
                params.p_v()
            );
            println!("expected key rate: {rate:.4e} per pulse pair");
        }
        Command::CalibrateDemo {
            config,
            out_dir,
            rounds,
            seed,
        } => {
            let mut scenario = load_scenario(&config)?;
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            let (log, sigma) = run_calibration_demo(&scenario, rounds, &out_dir)?;
            println!(
                "calibration loop: {} rounds, residual sigma {:.2} Hz",
                log.len(),
                sigma
            );
            println!(
                "log written to {}",
                out_dir
                    .join("traces")
                    .join(format!("{}_calibration.csv", scenario.name))
                    .display()
            );
        }
    }
    Ok(())
}
