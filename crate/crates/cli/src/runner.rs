//! Scenario execution: every kind computes its artifacts fully in memory and
//! only then hands them back for writing, so failed runs leave no partial
//! outputs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use otprop::ambiguity::OTAmbiguitySet;
use otprop::drcvar::{
    plan_trajectory, plan_trajectory_center_only, validate_plan, PlanResult, PlanStatus,
    PolyhedralTarget,
};
use otprop::measures::EmpiricalDistribution;
use otprop::systems::{
    consensus_limit, propagate_additive, propagate_combined, propagate_initial,
    propagate_multiplicative_with,
};
use otprop::transport::{ot_discrepancy, TransportCost};

use crate::scenario::{
    matrix_from_rows, trajectories_from, vector_from, NoiseSpec, Scenario, UncertaintySpec,
};
use crate::CliError;

/// Exit disposition of a successful run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    InfeasiblePlan,
}

pub struct Artifacts {
    pub result: Value,
    /// (file name, contents) pairs, written after the run completes.
    pub files: Vec<(String, String)>,
    pub stdout: Vec<String>,
    pub outcome: Outcome,
}

pub struct RunConfig {
    pub seed_override: Option<u64>,
    pub atom_budget: usize,
    pub scenario_hash: String,
}

fn core(e: otprop::Error) -> CliError {
    match e {
        otprop::Error::NumericalFailure(msg) => CliError::Numerical(msg),
        other => CliError::Schema(other.to_string()),
    }
}

/// Shortest round-trip decimal form (Rust's default float display).
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn csv(header: &str, rows: Vec<Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn result_shell(kind: &str, cfg: &RunConfig, body: Value) -> Value {
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "scenario_hash": cfg.scenario_hash,
        "kind": kind,
        "result": body,
    })
}

fn set_to_json(set: &OTAmbiguitySet) -> Value {
    serde_json::to_value(set).unwrap_or_else(|e| json!({ "error": e.to_string() }))
}

fn atoms_csv(dist: &EmpiricalDistribution, value_label: &str) -> String {
    let dim = dist.dim();
    let mut header = String::from("atom (index)");
    for k in 0..dim {
        header.push_str(&format!(",{value_label}{} (coordinate)", k + 1));
    }
    header.push_str(",weight (probability)");
    let rows = dist
        .atoms()
        .iter()
        .zip(dist.weights())
        .enumerate()
        .map(|(i, (a, w))| {
            let mut row = vec![i.to_string()];
            row.extend(a.iter().map(|x| fmt(*x)));
            row.push(fmt(*w));
            row
        })
        .collect();
    csv(&header, rows)
}

/// Gaussian draw via Box-Muller on the seeded stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn sample_trajectories(
    rng: &mut ChaCha8Rng,
    count: usize,
    horizon: usize,
    dim: usize,
    stddev: f64,
) -> Vec<Vec<DVector<f64>>> {
    (0..count)
        .map(|_| {
            (0..horizon)
                .map(|_| DVector::from_fn(dim, |_, _| stddev * normal(rng)))
                .collect()
        })
        .collect()
}

fn plan_to_json(plan: &PlanResult, input_dim: usize) -> Value {
    let us: Vec<Vec<f64>> = plan
        .inputs_time_ordered(input_dim)
        .iter()
        .map(|u| u.iter().copied().collect())
        .collect();
    json!({
        "status": match plan.status {
            PlanStatus::Optimal => "optimal",
            PlanStatus::Infeasible => "infeasible",
            PlanStatus::MaxIter => "max_iter",
        },
        "cost": plan.cost,
        "u": us,
        "worst_case_cvar": plan.worst_case_cvar,
        "certificate": {
            "tau": plan.certificate.tau,
            "lambda": plan.certificate.lambda,
            "s": plan.certificate.s,
        },
        "max_constraint_violation": plan.max_constraint_violation,
    })
}

fn terminal_csv_rows(
    eps: f64,
    phase: &str,
    states: &[DVector<f64>],
    target: &PolyhedralTarget,
) -> Vec<Vec<String>> {
    states
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let slack = target.slack(x);
            let mut row = vec![fmt(eps), phase.to_string(), i.to_string()];
            row.extend(x.iter().map(|v| fmt(*v)));
            row.push(fmt(slack));
            row.push(if slack <= 0.0 { "1" } else { "0" }.to_string());
            row
        })
        .collect()
}

fn terminal_header(dim: usize) -> String {
    let mut h = String::from("eps (transport budget),phase,sample (index)");
    for k in 0..dim {
        h.push_str(&format!(",x{} (state)", k + 1));
    }
    h.push_str(",slack (target violation),in_target (0/1)");
    h
}

pub fn run_scenario(scenario: &Scenario, cfg: &RunConfig) -> Result<Artifacts, CliError> {
    match scenario {
        Scenario::Discrepancy {
            p,
            q,
            cost,
            plan_csv,
            ..
        } => {
            let cost = cost.clone().unwrap_or_else(TransportCost::sq_norm);
            let (value, plan) = ot_discrepancy(p, q, &cost).map_err(core)?;
            let mut files = Vec::new();
            if *plan_csv {
                files.push(("plan.csv".to_string(), plan_csv_string(plan.matrix())));
            }
            let result = result_shell(
                "discrepancy",
                cfg,
                json!({
                    "value": value,
                    "p_atoms": p.support_size(),
                    "q_atoms": q.support_size(),
                    "marginal_residual": plan.max_marginal_residual(),
                }),
            );
            Ok(Artifacts {
                result,
                files,
                stdout: vec![
                    format!("W_c = {value:.11e}"),
                    format!(
                        "plan: {}x{} coupling, marginal residual {:.2e}",
                        p.support_size(),
                        q.support_size(),
                        plan.max_marginal_residual()
                    ),
                ],
                outcome: Outcome::Ok,
            })
        }

        Scenario::Propagate {
            system,
            horizon,
            x0,
            u,
            uncertainty,
            ..
        } => {
            let sys = system.realize()?;
            let horizon = *horizon;
            let us: Vec<DVector<f64>> = match u {
                Some(raw) => raw.iter().map(|step| vector_from(step)).collect(),
                None => vec![DVector::zeros(sys.input_dim()); horizon],
            };
            let x0_vec = x0
                .as_ref()
                .map(|x| vector_from(x))
                .unwrap_or_else(|| DVector::zeros(sys.state_dim()));
            let (label, set) = match uncertainty {
                UncertaintySpec::Initial { dist, eps } => {
                    let ball = OTAmbiguitySet::new(dist.clone(), *eps, TransportCost::sq_norm())
                        .map_err(CliError::schema)?;
                    (
                        "initial",
                        propagate_initial(&sys, &ball, &us, horizon).map_err(core)?,
                    )
                }
                UncertaintySpec::Additive { noise } => {
                    let ball = noise.realize()?;
                    (
                        "additive",
                        propagate_additive(&sys, &x0_vec, &us, &ball, horizon).map_err(core)?,
                    )
                }
                UncertaintySpec::Multiplicative { state, input } => {
                    let s1 = state.realize()?;
                    let s2 = input.realize()?;
                    let set = propagate_multiplicative_with(
                        &sys,
                        &x0_vec,
                        &us,
                        &s1,
                        &s2,
                        horizon,
                        cfg.atom_budget,
                        |_| {},
                    )
                    .map_err(core)?;
                    ("multiplicative", set)
                }
                UncertaintySpec::Combined { initial, noise } => {
                    let s0 = initial.realize()?;
                    let sn = noise.realize()?;
                    (
                        "combined",
                        propagate_combined(&sys, &s0, &sn, &us, horizon).map_err(core)?,
                    )
                }
            };
            let result = result_shell(
                "propagate",
                cfg,
                json!({
                    "uncertainty": label,
                    "set": set_to_json(&set),
                    "support": set.center().support_size(),
                    "exact": set.is_exact(),
                    "radius": set.radius(),
                }),
            );
            Ok(Artifacts {
                result,
                files: vec![("center_atoms.csv".into(), atoms_csv(set.center(), "x"))],
                stdout: vec![format!(
                    "{label} propagation: {} atoms, radius {}, exact: {}",
                    set.center().support_size(),
                    fmt(set.radius()),
                    set.is_exact()
                )],
                outcome: Outcome::Ok,
            })
        }

        Scenario::Plan {
            system,
            horizon,
            x0,
            eps,
            gamma,
            target,
            noise,
            seed,
            ..
        } => {
            let sys = system.realize()?;
            let target = target.realize()?;
            let x0 = vector_from(x0);
            let (train, test) = match noise {
                NoiseSpec::Trajectories(raw) => (trajectories_from(raw)?, Vec::new()),
                NoiseSpec::Sample {
                    train,
                    test,
                    stddev,
                } => {
                    let seed = cfg
                        .seed_override
                        .or(*seed)
                        .ok_or_else(|| CliError::Schema("sampled noise needs a seed".into()))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let tr =
                        sample_trajectories(&mut rng, *train, *horizon, sys.noise_dim(), *stddev);
                    let te =
                        sample_trajectories(&mut rng, *test, *horizon, sys.noise_dim(), *stddev);
                    (tr, te)
                }
            };
            let plan = plan_trajectory(&sys, &x0, &train, &target, *eps, *gamma, *horizon)
                .map_err(core)?;
            let mut files = Vec::new();
            let mut stdout = Vec::new();
            let body = plan_to_json(&plan, sys.input_dim());
            if plan.status == PlanStatus::Infeasible {
                files.push((
                    "certificate.json".into(),
                    serde_json::to_string_pretty(&body).expect("serializable"),
                ));
                stdout.push(format!(
                    "plan infeasible: minimal constraint violation {:.3e}",
                    plan.max_constraint_violation
                ));
                let result = result_shell("plan", cfg, body);
                return Ok(Artifacts {
                    result,
                    files,
                    stdout,
                    outcome: Outcome::InfeasiblePlan,
                });
            }
            if plan.status == PlanStatus::MaxIter {
                return Err(CliError::Numerical(
                    "planner hit its iteration budget without converging".into(),
                ));
            }
            stdout.push(format!(
                "plan optimal: cost {}, worst-case CVaR {:.3e}",
                fmt(plan.cost),
                plan.worst_case_cvar
            ));
            let report =
                validate_plan(&sys, &x0, &plan.u_stacked, &train, &target, *gamma).map_err(core)?;
            let mut rows = terminal_csv_rows(*eps, "train", &report.terminal_states, &target);
            let mut extra = json!({});
            if !test.is_empty() {
                let test_report = validate_plan(&sys, &x0, &plan.u_stacked, &test, &target, *gamma)
                    .map_err(core)?;
                rows.extend(terminal_csv_rows(
                    *eps,
                    "test",
                    &test_report.terminal_states,
                    &target,
                ));
                extra = json!({
                    "test_empirical_cvar": test_report.empirical_cvar,
                    "test_fraction_in_target": test_report.fraction_in_target,
                });
            }
            files.push((
                "terminal_states.csv".into(),
                csv(&terminal_header(sys.state_dim()), rows),
            ));
            let mut body = body;
            body["train_empirical_cvar"] = json!(report.empirical_cvar);
            body["train_fraction_in_target"] = json!(report.fraction_in_target);
            if let Value::Object(map) = extra {
                for (k, v) in map {
                    body[k] = v;
                }
            }
            let result = result_shell("plan", cfg, body);
            Ok(Artifacts {
                result,
                files,
                stdout,
                outcome: Outcome::Ok,
            })
        }

        Scenario::Consensus {
            a,
            p0,
            eps,
            trace_steps,
            ..
        } => {
            let a = matrix_from_rows(a, "consensus.a")?;
            let ball = OTAmbiguitySet::new(p0.clone(), *eps, TransportCost::sq_norm())
                .map_err(CliError::schema)?;
            let outcome = consensus_limit(&a, &ball).map_err(core)?;
            let n = a.nrows();

            let steps = trace_steps.unwrap_or(25);
            let mut trace_rows = Vec::new();
            let mut state: Vec<DVector<f64>> = p0.atoms().to_vec();
            for t in 0..=steps {
                for (i, x) in state.iter().enumerate() {
                    let limit = outcome.lift(outcome.weights.dot(&p0.atoms()[i]));
                    trace_rows.push(vec![
                        t.to_string(),
                        i.to_string(),
                        fmt((x - &limit).abs().max()),
                    ]);
                }
                state = state.iter().map(|x| &a * x).collect();
            }
            let trace = csv(
                "t (iteration),atom (index),deviation (max-norm from consensus)",
                trace_rows,
            );
            let summary = csv(
                "n (nodes),eps (transport budget),radius (consensus budget),norm_w_sq (left eigenvector),doubly_stochastic (0/1)",
                vec![vec![
                    n.to_string(),
                    fmt(*eps),
                    fmt(outcome.set.radius()),
                    fmt(outcome.weights.norm_squared()),
                    if outcome.doubly_stochastic { "1" } else { "0" }.to_string(),
                ]],
            );
            let result = result_shell(
                "consensus",
                cfg,
                json!({
                    "radius": outcome.set.radius(),
                    "weights": outcome.weights.iter().copied().collect::<Vec<f64>>(),
                    "doubly_stochastic": outcome.doubly_stochastic,
                    "set": set_to_json(&outcome.set),
                }),
            );
            Ok(Artifacts {
                result,
                files: vec![
                    ("consensus_summary.csv".into(), summary),
                    ("consensus_trace.csv".into(), trace),
                    (
                        "consensus_atoms.csv".into(),
                        atoms_csv(outcome.set.center(), "value"),
                    ),
                ],
                stdout: vec![format!(
                    "consensus radius {} (doubly stochastic: {})",
                    fmt(outcome.set.radius()),
                    outcome.doubly_stochastic
                )],
                outcome: Outcome::Ok,
            })
        }

        Scenario::Ols { a, noise, .. } => {
            let a = matrix_from_rows(a, "ols.a")?;
            let set = match (&noise.dist, &noise.iid) {
                (Some(dist), None) => {
                    let ball =
                        OTAmbiguitySet::new(dist.clone(), noise.eps, TransportCost::sq_norm())
                            .map_err(CliError::schema)?;
                    otprop::systems::ols_error_set(&a, &ball).map_err(core)?
                }
                (None, Some(one_d)) => {
                    let ball =
                        OTAmbiguitySet::new(one_d.clone(), noise.eps, TransportCost::sq_norm())
                            .map_err(CliError::schema)?;
                    otprop::systems::ols_error_set_iid(&a, &ball).map_err(core)?
                }
                _ => {
                    return Err(CliError::Schema(
                        "ols noise needs exactly one of `dist` or `iid`".into(),
                    ))
                }
            };
            let result = result_shell(
                "ols",
                cfg,
                json!({
                    "set": set_to_json(&set),
                    "radius": set.radius(),
                    "exact": set.is_exact(),
                }),
            );
            Ok(Artifacts {
                result,
                files: vec![("error_atoms.csv".into(), atoms_csv(set.center(), "e"))],
                stdout: vec![format!(
                    "estimation-error set: {} atoms, radius {}",
                    set.center().support_size(),
                    fmt(set.radius())
                )],
                outcome: Outcome::Ok,
            })
        }

        Scenario::Demo {
            system,
            horizon,
            x0,
            gamma,
            target,
            eps_list,
            train,
            test,
            stddev,
            seed,
            compare_center_only,
            ..
        } => {
            let sys = system.realize()?;
            let target = target.realize()?;
            let x0 = vector_from(x0);
            let seed = cfg.seed_override.unwrap_or(*seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train_traj =
                sample_trajectories(&mut rng, *train, *horizon, sys.noise_dim(), *stddev);
            let test_traj =
                sample_trajectories(&mut rng, *test, *horizon, sys.noise_dim(), *stddev);

            let mut cost_rows = Vec::new();
            let mut terminal_rows = Vec::new();
            let mut summaries = Vec::new();
            let mut stdout = Vec::new();
            for &eps in eps_list {
                let plan = plan_trajectory(&sys, &x0, &train_traj, &target, eps, *gamma, *horizon)
                    .map_err(core)?;
                let status = match plan.status {
                    PlanStatus::Optimal => "optimal",
                    PlanStatus::Infeasible => "infeasible",
                    PlanStatus::MaxIter => "max_iter",
                };
                let mut center_only_status = "skipped".to_string();
                if *compare_center_only {
                    let naive = plan_trajectory_center_only(
                        &sys,
                        &x0,
                        &train_traj,
                        &target,
                        eps,
                        *gamma,
                        *horizon,
                    )
                    .map_err(core)?;
                    center_only_status = match naive.status {
                        PlanStatus::Optimal => "optimal",
                        PlanStatus::Infeasible => "infeasible",
                        PlanStatus::MaxIter => "max_iter",
                    }
                    .to_string();
                }
                let (train_cvar, test_cvar) = if plan.status == PlanStatus::Optimal {
                    let train_report =
                        validate_plan(&sys, &x0, &plan.u_stacked, &train_traj, &target, *gamma)
                            .map_err(core)?;
                    let test_report =
                        validate_plan(&sys, &x0, &plan.u_stacked, &test_traj, &target, *gamma)
                            .map_err(core)?;
                    terminal_rows.extend(terminal_csv_rows(
                        eps,
                        "train",
                        &train_report.terminal_states,
                        &target,
                    ));
                    terminal_rows.extend(terminal_csv_rows(
                        eps,
                        "test",
                        &test_report.terminal_states,
                        &target,
                    ));
                    (train_report.empirical_cvar, test_report.empirical_cvar)
                } else {
                    (f64::NAN, f64::NAN)
                };
                stdout.push(format!(
                    "eps {}: {} cost {} (center-only: {})",
                    fmt(eps),
                    status,
                    fmt(plan.cost),
                    center_only_status
                ));
                cost_rows.push(vec![
                    fmt(eps),
                    status.to_string(),
                    fmt(plan.cost),
                    fmt(plan.worst_case_cvar),
                    fmt(train_cvar),
                    fmt(test_cvar),
                    center_only_status.clone(),
                ]);
                summaries.push(json!({
                    "eps": eps,
                    "status": status,
                    "cost": plan.cost,
                    "worst_case_cvar": plan.worst_case_cvar,
                    "train_empirical_cvar": train_cvar,
                    "test_empirical_cvar": test_cvar,
                    "center_only_status": center_only_status,
                }));
            }
            let result = result_shell(
                "demo",
                cfg,
                json!({
                    "seed": seed,
                    "train": train,
                    "test": test,
                    "sweeps": summaries,
                }),
            );
            Ok(Artifacts {
                result,
                files: vec![
                    (
                        "cost_curve.csv".into(),
                        csv(
                            "eps (transport budget),status,cost (input energy),worst_case_cvar,train_empirical_cvar,test_empirical_cvar,center_only_status",
                            cost_rows,
                        ),
                    ),
                    (
                        "terminal_states.csv".into(),
                        csv(&terminal_header(sys.state_dim()), terminal_rows),
                    ),
                ],
                stdout,
                outcome: Outcome::Ok,
            })
        }
    }
}

pub fn plan_csv_string(matrix: &DMatrix<f64>) -> String {
    let mut header = String::from("row (source atom)");
    for j in 0..matrix.ncols() {
        header.push_str(&format!(",q{} (mass)", j + 1));
    }
    let rows = (0..matrix.nrows())
        .map(|i| {
            let mut row = vec![i.to_string()];
            row.extend((0..matrix.ncols()).map(|j| fmt(matrix[(i, j)])));
            row
        })
        .collect();
    csv(&header, rows)
}

/// Helper shared with the discrepancy subcommand.
pub fn discrepancy_stdout(value: f64) -> String {
    format!("W_c = {value:.11e}")
}
