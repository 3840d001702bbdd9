//! `sbeedlab solve|sbeed|msbo|verify|rate|lambda-sweep --config <file> [--seed N] [--out DIR] [--force]`
//!
//! Exit codes: 0 when every check passes, 1 when a bound or identity check
//! fails, 2 on usage, configuration or I/O errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sbeedlab::experiment::{
    emit_report, guard_outputs, run_lambda_sweep, run_msbo, run_rate_experiment, run_sbeed,
    run_solve, run_verify, write_outputs, ExperimentConfig, Report,
};
use sbeedlab::{Error, Result};

/// Files written by `rate` and `lambda-sweep` (see `experiment::report_files`).
const RATE_FILES: [&str; 3] = ["runs.csv", "summary.json", "config.echo.json"];
const SWEEP_FILES: [&str; 3] = ["sweep.csv", "summary.json", "config.echo.json"];

#[derive(Parser)]
#[command(name = "sbeedlab", version, about = "Batch SBEED on tabular entropy-regularized MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact soft and hard optima of the configured MDP (Lemma 1 check).
    Solve(Common),
    /// One exact SBEED solve at the largest grid size, with Lemma 3 and Theorem 1 checks.
    Sbeed(Common),
    /// One exact MSBO solve at the largest grid size.
    Msbo(Common),
    /// Verification suite: Lemmas 1-3, 5-7, 9, Eq. 3 and Theorem 1.
    Verify(Common),
    /// Statistical-rate experiment over the configured n grid.
    Rate(Common),
    /// Regularization-bias sweep over `lambda_grid`.
    LambdaSweep(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Prints `value` and stores it as `name` next to the echoed config.
fn emit_json<T: Serialize>(
    config: &ExperimentConfig,
    name: &str,
    value: &T,
    force: bool,
) -> Result<()> {
    let body = pretty(value)?;
    print!("{}", String::from_utf8_lossy(&body));
    write_outputs(
        &config.output_dir,
        &[(name, body), ("config.echo.json", pretty(config)?)],
        force,
    )?;
    Ok(())
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Solve(c) => {
            let config = c.load()?;
            guard_outputs(&config.output_dir, &["solve.json", "config.echo.json"], c.force)?;
            let report = run_solve(&config)?;
            emit_json(&config, "solve.json", &report, c.force)?;
            Ok(report.passed)
        }
        Command::Sbeed(c) => {
            let config = c.load()?;
            guard_outputs(&config.output_dir, &["sbeed.json", "config.echo.json"], c.force)?;
            let report = run_sbeed(&config)?;
            emit_json(&config, "sbeed.json", &report, c.force)?;
            Ok(report.passed)
        }
        Command::Msbo(c) => {
            let config = c.load()?;
            guard_outputs(&config.output_dir, &["msbo.json", "config.echo.json"], c.force)?;
            let report = run_msbo(&config)?;
            emit_json(&config, "msbo.json", &report, c.force)?;
            Ok(true)
        }
        Command::Verify(c) => {
            let config = c.load()?;
            guard_outputs(&config.output_dir, &["verify.json", "config.echo.json"], c.force)?;
            let report = run_verify(&config)?;
            print!("{}", report.table());
            write_outputs(
                &config.output_dir,
                &[
                    ("verify.json", pretty(&report)?),
                    ("config.echo.json", pretty(&config)?),
                ],
                c.force,
            )?;
            Ok(report.passed())
        }
        Command::Rate(c) => {
            let config = c.load()?;
            guard_outputs(&config.output_dir, &RATE_FILES, c.force)?;
            let report = run_rate_experiment(&config)?;
            let passed = report.passed();
            println!(
                "rate: {} runs, slope {}, bound violations {}, Lemma 3 violations {}",
                report.records.len(),
                report.slope.map_or("n/a".to_string(), |s| format!("{s:.4}")),
                report.bound_violations,
                report.lemma3_violations
            );
            let aborted = report.aborted.clone();
            emit_report(&Report::Rate(report), &config, &config.output_dir, c.force)?;
            if let Some(msg) = aborted {
                return Err(Error::InvalidInput(format!("rate experiment aborted: {msg}")));
            }
            Ok(passed)
        }
        Command::LambdaSweep(c) => {
            let config = c.load()?;
            let grid = config.lambda_grid.clone().ok_or_else(|| {
                Error::InvalidConfig("lambda-sweep needs `lambda_grid` in the config".into())
            })?;
            guard_outputs(&config.output_dir, &SWEEP_FILES, c.force)?;
            let report = run_lambda_sweep(&config, &grid)?;
            for r in &report.records {
                println!(
                    "lambda {:>10.3e}  bias {:>12.5e}  bound {:>12.5e}  {}",
                    r.lambda,
                    r.bias_observed,
                    r.bias_bound,
                    if r.within_bound { "PASS" } else { "FAIL" }
                );
            }
            let passed = report.passed();
            emit_report(&Report::LambdaSweep(report), &config, &config.output_dir, c.force)?;
            Ok(passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("sbeedlab: a check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("sbeedlab: {e}");
            ExitCode::from(2)
        }
    }
}
