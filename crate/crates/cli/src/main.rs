//! `mslca fit | test | simulate`.
//!
//! Exit codes: 0 success, 1 internal error, 2 bad input, 3 near-singular
//! covariance block, 4 simulation plan precondition violated.

mod input;
mod report;

use std::fmt;
use std::fs;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mslca::asymptotics::DEFAULT_MC_DRAWS;
use mslca::estimation::{fit_mslca_with, FitOptions};
use mslca::noncorr::{test_chi2, test_general, McSettings, ScaleSpec};
use mslca::simulate::{run, SimulationPlan};
use mslca::MslcaError;
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Internal(String),
    Input(String),
    Singular(String),
    Precondition(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Input(_) => 2,
            CliError::Singular(_) => 3,
            CliError::Precondition(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Internal(m) => write!(f, "internal error: {m}"),
            CliError::Input(m) | CliError::Singular(m) | CliError::Precondition(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<MslcaError> for CliError {
    fn from(e: MslcaError) -> Self {
        match e {
            MslcaError::NearSingular { .. } => CliError::Singular(e.to_string()),
            MslcaError::NoConvergence => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "mslca", version, about = "Multiple-set linear canonical analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate canonical coefficients and directions from a CSV sample.
    Fit {
        #[arg(long)]
        data: String,
        /// Comma-separated block sizes, e.g. "2,3,2".
        #[arg(long)]
        blocks: String,
        #[arg(long)]
        out: String,
        #[arg(long, default_value_t = mslca::population::DEFAULT_GROUP_TOL)]
        group_tol: f64,
        #[arg(long, default_value_t = mslca::block::DEFAULT_COND_FLOOR)]
        cond_floor: f64,
    },
    /// Test mutual non-correlation of the blocks.
    Test {
        #[arg(long)]
        data: String,
        #[arg(long)]
        blocks: String,
        #[arg(long, value_enum, default_value_t = Method::Chi2)]
        method: Method,
        /// gaussian, plugin or a positive number (chi2 only).
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Monte Carlo draws for the general route.
        #[arg(long)]
        mc_reps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: String,
    },
    /// Run a Monte Carlo experiment described by a JSON plan.
    Simulate {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Chi2,
    General,
}

fn parse_scale(s: &str) -> Result<ScaleSpec, CliError> {
    match s {
        "gaussian" => Ok(ScaleSpec::Gaussian),
        "plugin" => Ok(ScaleSpec::Plugin),
        other => match other.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(ScaleSpec::Explicit(v)),
            Ok(v) => Err(CliError::Input(format!("--scale must be positive, got {v}"))),
            Err(_) => Err(CliError::Input(format!(
                "--scale must be gaussian, plugin or a number, got {other:?}"
            ))),
        },
    }
}

fn write_json<T: Serialize>(path: &str, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Input(format!("cannot write {path}: {e}")))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit {
            data,
            blocks,
            out,
            group_tol,
            cond_floor,
        } => {
            let structure = input::parse_blocks(&blocks)?;
            let dataset = input::read_dataset(&data, &structure)?;
            let fit = fit_mslca_with(&dataset, FitOptions { group_tol, cond_floor })?;
            write_json(&out, &report::fit_report(&fit))
        }
        Command::Test {
            data,
            blocks,
            method,
            scale,
            alpha,
            mc_reps,
            seed,
            out,
        } => {
            let structure = input::parse_blocks(&blocks)?;
            let report = match method {
                Method::Chi2 => {
                    if mc_reps.is_some() {
                        return Err(CliError::Input("--mc-reps applies to --method general only".into()));
                    }
                    let scale = parse_scale(scale.as_deref().unwrap_or("gaussian"))?;
                    let dataset = input::read_dataset(&data, &structure)?;
                    let fit = fit_mslca_with(&dataset, FitOptions::default())?;
                    test_chi2(&fit, &dataset, scale, alpha)?
                }
                Method::General => {
                    if scale.is_some() {
                        return Err(CliError::Input("--scale applies to --method chi2 only".into()));
                    }
                    let draws = mc_reps.unwrap_or(DEFAULT_MC_DRAWS);
                    let dataset = input::read_dataset(&data, &structure)?;
                    let fit = fit_mslca_with(&dataset, FitOptions::default())?;
                    test_general(&fit, &dataset, alpha, McSettings { draws, seed })?
                }
            };
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            write_json(&out, &report)?;
            println!(
                "nS={} d={} p={} reject={}",
                report.ns, report.d, report.p_value, report.reject
            );
            Ok(())
        }
        Command::Simulate { config, out } => {
            let text = fs::read_to_string(&config)
                .map_err(|e| CliError::Input(format!("cannot read {config}: {e}")))?;
            let plan: SimulationPlan = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{config}: {e}")))?;
            plan.validate()
                .map_err(|e| CliError::Precondition(format!("{config}: {e}")))?;
            let result = run(&plan)?;
            write_json(&out, &result)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mslca: {e}");
            ExitCode::from(e.code())
        }
    }
}
