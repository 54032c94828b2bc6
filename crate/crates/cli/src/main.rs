use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ratioeval::cli::{cmd_simulate, cmd_solve, cmd_validate, cmd_verify, Experiment, ExperimentConfig};
use ratioeval::market::Status;
use ratioeval::Error;

#[derive(Parser)]
#[command(name = "ratioeval", version, about = "Periodic relative-performance portfolio optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override of the Monte Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Override of the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Artifacts {
    /// Directory with the output of `solve`; defaults to `--out`.
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Multiplies every portfolio of the solved policy.
    #[arg(long, default_value_t = 1.0)]
    policy_scale: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing assumptions on the model.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Solve for the fixed point and write A_star.csv, policy.csv, run_report.json.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the verification checks on solved artifacts.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        artifacts: Artifacts,
    },
    /// Roll out the solved policy and write rollout.csv and summary.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        artifacts: Artifacts,
    },
}

fn experiment(c: &Common) -> anyhow::Result<Experiment> {
    let cfg = ExperimentConfig::load(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    Ok(Experiment::with_overrides(cfg, c.paths, c.seed)?)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Validate { common } => {
            let exp = experiment(&common)?;
            let report = cmd_validate(&exp);
            for c in &report.checks {
                let tag = match c.status {
                    Status::Pass => "pass",
                    Status::NotFalsified => "not falsified",
                    Status::Fail => "FAIL",
                };
                println!("{tag:>13}  {}: {} (lhs = {}, rhs = {})", c.name, c.detail, c.lhs, c.rhs);
            }
            Ok(report.passed)
        }
        Command::Solve { common, out } => {
            let exp = experiment(&common)?;
            let r = cmd_solve(&exp, &out)?;
            println!(
                "solved in {} iterations, posterior error bound {:e}, A* inside bounds: {}",
                r.iterations, r.posterior_error_bound, r.a_star_in_bounds
            );
            Ok(true)
        }
        Command::Verify { common, out, artifacts } => {
            let exp = experiment(&common)?;
            let dir = artifacts.artifacts.unwrap_or_else(|| out.clone());
            let r = cmd_verify(&exp, &dir, &out, artifacts.policy_scale)?;
            for c in &r.checks {
                println!("{}  {}: {} (threshold {}) {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.value, c.threshold, c.detail);
            }
            Ok(r.passed)
        }
        Command::Simulate { common, out, artifacts } => {
            let exp = experiment(&common)?;
            let dir = artifacts.artifacts.unwrap_or_else(|| out.clone());
            let s = cmd_simulate(&exp, &dir, &out, artifacts.policy_scale)?;
            println!(
                "objective {} +- {} (tail bound {}), value estimate {} +- {}",
                s.objective, s.objective_se, s.tail_bound, s.value_estimate, s.value_se
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
