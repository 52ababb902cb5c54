//! `otprop`: exact discrete optimal transport, ambiguity propagation, and
//! distributionally robust planning from scenario files.
//!
//! Exit codes: 0 success, 2 schema violation or unreadable input, 3 numerical
//! failure, 4 infeasible plan (certificate written).

mod runner;
mod scenario;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use otprop::transport::{ot_discrepancy, TransportCost};

use runner::{run_scenario, Artifacts, Outcome, RunConfig};
use scenario::{Scenario, UncertaintySpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    fn schema(e: impl std::fmt::Display) -> Self {
        CliError::Schema(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "otprop",
    version,
    about = "Transport-ball uncertainty propagation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario file and write its artifacts.
    Run {
        scenario: PathBuf,
        /// Override the scenario's transport budget(s).
        #[arg(long)]
        eps: Option<f64>,
        /// Override the scenario's CVaR tail mass.
        #[arg(long)]
        gamma: Option<f64>,
        /// Override the scenario's horizon.
        #[arg(long)]
        horizon: Option<usize>,
        /// Override the scenario's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the scenario's `output`, then `.`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap on support sizes produced by product-type operation.
        #[arg(long)]
        atom_budget: Option<usize>,
    },
    /// Exact transport discrepancy between two distribution files.
    Discrepancy {
        p: PathBuf,
        q: PathBuf,
        /// Norm exponent of the cost scale * ||d||^power.
        #[arg(long, default_value_t = 2.0)]
        power: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// JSON file with a symmetric PSD weight matrix (overrides power/scale).
        #[arg(long)]
        w_matrix: Option<PathBuf>,
        /// Write the optimal coupling matrix to this CSV path.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            scenario,
            eps,
            gamma,
            horizon,
            seed,
            out,
            atom_budget,
        } => run_command(&scenario, eps, gamma, horizon, seed, out, atom_budget),
        Command::Discrepancy {
            p,
            q,
            power,
            scale,
            w_matrix,
            plan,
        } => discrepancy_command(&p, &q, power, scale, w_matrix.as_deref(), plan.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn run_command(
    path: &Path,
    eps: Option<f64>,
    gamma: Option<f64>,
    horizon: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    atom_budget: Option<usize>,
) -> Result<ExitCode, CliError> {
    let bytes = read_file(path)?;
    let mut scenario: Scenario =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Schema(e.to_string()))?;
    apply_overrides(&mut scenario, eps, gamma, horizon);

    let cfg = RunConfig {
        seed_override: seed,
        atom_budget: atom_budget.unwrap_or(otprop::measures::DEFAULT_ATOM_BUDGET),
        scenario_hash: format!("{:016x}", fnv1a(&bytes)),
    };
    let artifacts = run_scenario(&scenario, &cfg)?;

    let out_dir = out
        .or_else(|| scenario.output().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    write_artifacts(&out_dir, &artifacts)?;
    for line in &artifacts.stdout {
        println!("{line}");
    }
    println!("artifacts written to {}", out_dir.display());
    Ok(match artifacts.outcome {
        Outcome::Ok => ExitCode::SUCCESS,
        Outcome::InfeasiblePlan => ExitCode::from(4),
    })
}

fn apply_overrides(
    scenario: &mut Scenario,
    eps: Option<f64>,
    gamma: Option<f64>,
    horizon: Option<usize>,
) {
    match scenario {
        Scenario::Discrepancy { .. } => {}
        Scenario::Propagate {
            horizon: h,
            uncertainty,
            ..
        } => {
            if let Some(hz) = horizon {
                *h = hz;
            }
            if let Some(e) = eps {
                match uncertainty {
                    UncertaintySpec::Initial { eps, .. } => *eps = e,
                    UncertaintySpec::Additive { noise } => noise.eps = e,
                    UncertaintySpec::Multiplicative { state, input } => {
                        state.eps = e;
                        input.eps = e;
                    }
                    UncertaintySpec::Combined { initial, noise } => {
                        initial.eps = e;
                        noise.eps = e;
                    }
                }
            }
        }
        Scenario::Plan {
            eps: e,
            gamma: g,
            horizon: h,
            ..
        } => {
            if let Some(v) = eps {
                *e = v;
            }
            if let Some(v) = gamma {
                *g = v;
            }
            if let Some(v) = horizon {
                *h = v;
            }
        }
        Scenario::Consensus { eps: e, .. } => {
            if let Some(v) = eps {
                *e = v;
            }
        }
        Scenario::Ols { noise, .. } => {
            if let Some(v) = eps {
                noise.eps = v;
            }
        }
        Scenario::Demo {
            eps_list,
            gamma: g,
            horizon: h,
            ..
        } => {
            if let Some(v) = eps {
                *eps_list = vec![v];
            }
            if let Some(v) = gamma {
                *g = v;
            }
            if let Some(v) = horizon {
                *h = v;
            }
        }
    }
}

fn write_artifacts(dir: &Path, artifacts: &Artifacts) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Schema(format!("{}: {e}", dir.display())))?;
    let result_text = serde_json::to_string_pretty(&artifacts.result).map_err(CliError::schema)?;
    let mut outputs = vec![("result.json".to_string(), result_text + "\n")];
    outputs.extend(artifacts.files.iter().cloned());
    for (name, contents) in outputs {
        let path = dir.join(name);
        fs::write(&path, contents)
            .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn discrepancy_command(
    p_path: &Path,
    q_path: &Path,
    power: f64,
    scale: f64,
    w_matrix: Option<&Path>,
    plan_out: Option<&Path>,
) -> Result<ExitCode, CliError> {
    let p: otprop::measures::EmpiricalDistribution =
        serde_json::from_slice(&read_file(p_path)?).map_err(CliError::schema)?;
    let q: otprop::measures::EmpiricalDistribution =
        serde_json::from_slice(&read_file(q_path)?).map_err(CliError::schema)?;
    let cost = match w_matrix {
        Some(path) => {
            let rows: Vec<Vec<f64>> =
                serde_json::from_slice(&read_file(path)?).map_err(CliError::schema)?;
            let m = scenario::matrix_from_rows(&rows, "weight matrix")?;
            TransportCost::quadratic(m).map_err(CliError::schema)?
        }
        None => TransportCost::scaled_power(power, scale).map_err(CliError::schema)?,
    };
    let (value, plan) = ot_discrepancy(&p, &q, &cost).map_err(|e| match e {
        otprop::Error::NumericalFailure(msg) => CliError::Numerical(msg),
        other => CliError::Schema(other.to_string()),
    })?;
    println!("{}", runner::discrepancy_stdout(value));
    println!(
        "plan: {}x{} coupling, marginal residual {:.2e}",
        p.support_size(),
        q.support_size(),
        plan.max_marginal_residual()
    );
    if let Some(path) = plan_out {
        fs::write(path, runner::plan_csv_string(plan.matrix()))
            .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        println!("coupling written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
