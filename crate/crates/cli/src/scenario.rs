//! Scenario file schema and conversions into library types.
//!
//! Scenarios are JSON with a `kind` tag; unknown fields are rejected so that
//! typos surface as schema violations.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use otprop::ambiguity::OTAmbiguitySet;
use otprop::drcvar::PolyhedralTarget;
use otprop::measures::EmpiricalDistribution;
use otprop::systems::{LTISystem, StackedOperators};
use otprop::transport::TransportCost;

use crate::CliError;

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    /// Exact transport discrepancy between two distributions.
    Discrepancy {
        p: EmpiricalDistribution,
        q: EmpiricalDistribution,
        #[serde(default)]
        cost: Option<TransportCost>,
        /// Also write the optimal coupling matrix.
        #[serde(default)]
        plan_csv: bool,
        #[serde(default)]
        output: Option<String>,
    },
    /// Ambiguity propagation through a linear system.
    Propagate {
        system: SystemSpec,
        horizon: usize,
        #[serde(default)]
        x0: Option<Vec<f64>>,
        #[serde(default)]
        u: Option<Vec<Vec<f64>>>,
        uncertainty: UncertaintySpec,
        #[serde(default)]
        output: Option<String>,
    },
    /// Distributionally robust trajectory planning.
    Plan {
        system: SystemSpec,
        horizon: usize,
        x0: Vec<f64>,
        eps: f64,
        gamma: f64,
        target: TargetSpec,
        noise: NoiseSpec,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        output: Option<String>,
    },
    /// Consensus-limit uncertainty for an averaging iteration.
    Consensus {
        a: Vec<Vec<f64>>,
        p0: EmpiricalDistribution,
        eps: f64,
        /// Steps recorded in the convergence trace.
        #[serde(default)]
        trace_steps: Option<usize>,
        #[serde(default)]
        output: Option<String>,
    },
    /// Least-squares estimation-error set.
    Ols {
        a: Vec<Vec<f64>>,
        noise: OlsNoiseSpec,
        #[serde(default)]
        output: Option<String>,
    },
    /// Train/test steering experiment sweeping the transport budget.
    Demo {
        system: SystemSpec,
        horizon: usize,
        x0: Vec<f64>,
        gamma: f64,
        target: TargetSpec,
        eps_list: Vec<f64>,
        train: usize,
        test: usize,
        #[serde(default = "default_stddev")]
        stddev: f64,
        seed: u64,
        /// Also plan against the un-composed (center-only) cost.
        #[serde(default)]
        compare_center_only: bool,
        #[serde(default)]
        output: Option<String>,
    },
}

fn default_stddev() -> f64 {
    1.0
}

impl Scenario {
    pub fn output(&self) -> Option<&str> {
        match self {
            Scenario::Discrepancy { output, .. }
            | Scenario::Propagate { output, .. }
            | Scenario::Plan { output, .. }
            | Scenario::Consensus { output, .. }
            | Scenario::Ols { output, .. }
            | Scenario::Demo { output, .. } => output.as_deref(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "D", default)]
    pub d: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum UncertaintySpec {
    /// Uncertain initial state, deterministic dynamics.
    Initial {
        dist: EmpiricalDistribution,
        eps: f64,
    },
    /// Additive process noise over the whole horizon.
    Additive {
        #[serde(flatten)]
        noise: BallSpec,
    },
    /// Element-wise multiplicative noise on state and input channels.
    Multiplicative { state: BallSpec, input: BallSpec },
    /// Uncertain initial state plus additive noise.
    Combined { initial: BallSpec, noise: BallSpec },
}

/// A ball given by its center (either a distribution, or noise trajectories
/// that are stacked newest-first) and a radius.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallSpec {
    #[serde(default)]
    pub dist: Option<EmpiricalDistribution>,
    #[serde(default)]
    pub trajectories: Option<Vec<Vec<Vec<f64>>>>,
    pub eps: f64,
}

impl BallSpec {
    pub fn realize(&self) -> Result<OTAmbiguitySet, CliError> {
        let center = match (&self.dist, &self.trajectories) {
            (Some(d), None) => d.clone(),
            (None, Some(trajs)) => {
                let stacked: Result<Vec<DVector<f64>>, CliError> =
                    trajs.iter().map(|t| stack_trajectory(t)).collect();
                EmpiricalDistribution::uniform(stacked?).map_err(CliError::schema)?
            }
            _ => {
                return Err(CliError::Schema(
                    "ball needs exactly one of `dist` or `trajectories`".into(),
                ))
            }
        };
        OTAmbiguitySet::new(center, self.eps, TransportCost::sq_norm()).map_err(CliError::schema)
    }
}

fn stack_trajectory(traj: &[Vec<f64>]) -> Result<DVector<f64>, CliError> {
    if traj.is_empty() {
        return Err(CliError::Schema("empty noise trajectory".into()));
    }
    let block = traj[0].len();
    if traj.iter().any(|w| w.len() != block) {
        return Err(CliError::Schema("ragged noise trajectory".into()));
    }
    let steps: Vec<DVector<f64>> = traj.iter().map(|w| DVector::from_vec(w.clone())).collect();
    Ok(StackedOperators::stack_time_series(&steps))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    #[serde(default)]
    pub rows: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub offsets: Option<Vec<f64>>,
    #[serde(rename = "box", default)]
    pub bounding_box: Option<BoxSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl TargetSpec {
    pub fn realize(&self) -> Result<PolyhedralTarget, CliError> {
        match (&self.rows, &self.offsets, &self.bounding_box) {
            (Some(rows), Some(offsets), None) => {
                let rows = rows.iter().map(|r| DVector::from_vec(r.clone())).collect();
                PolyhedralTarget::new(rows, offsets.clone()).map_err(CliError::schema)
            }
            (None, None, Some(b)) => {
                PolyhedralTarget::bounding_box(&b.lo, &b.hi).map_err(CliError::schema)
            }
            _ => Err(CliError::Schema(
                "target needs either `rows` + `offsets` or `box`".into(),
            )),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub enum NoiseSpec {
    /// Explicit per-step noise trajectories (time order).
    #[serde(rename = "trajectories")]
    Trajectories(Vec<Vec<Vec<f64>>>),
    /// Sample Gaussian trajectories from the scenario seed.
    #[serde(rename = "sample")]
    Sample {
        train: usize,
        test: usize,
        stddev: f64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OlsNoiseSpec {
    /// Noise distribution over all measurements jointly.
    #[serde(default)]
    pub dist: Option<EmpiricalDistribution>,
    /// 1-D noise distribution applied i.i.d. per measurement.
    #[serde(default)]
    pub iid: Option<EmpiricalDistribution>,
    pub eps: f64,
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.is_empty() {
        return Err(CliError::Schema(format!("{what}: empty matrix")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Schema(format!("{what}: ragged or empty matrix")));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        cols,
        rows.iter().flatten().copied(),
    ))
}

impl SystemSpec {
    pub fn realize(&self) -> Result<LTISystem, CliError> {
        let a = matrix_from_rows(&self.a, "system.A")?;
        let b = matrix_from_rows(&self.b, "system.B")?;
        let d = self
            .d
            .as_ref()
            .map(|d| matrix_from_rows(d, "system.D"))
            .transpose()?;
        LTISystem::new(a, b, d).map_err(CliError::schema)
    }
}

pub fn vector_from(values: &[f64]) -> DVector<f64> {
    DVector::from_vec(values.to_vec())
}

pub fn trajectories_from(raw: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<DVector<f64>>>, CliError> {
    raw.iter()
        .map(|traj| {
            if traj.is_empty() {
                return Err(CliError::Schema("empty noise trajectory".into()));
            }
            Ok(traj.iter().map(|w| DVector::from_vec(w.clone())).collect())
        })
        .collect()
}
