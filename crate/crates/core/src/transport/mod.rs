//! Transportation-cost descriptors and the exact discrete optimal-transport
//! discrepancy.
//!
//! The discrepancy between two finitely supported distributions is the value
//! of the classical transportation linear program. [`ot_discrepancy`] solves
//! it exactly with a network-simplex specialization and returns the optimal
//! coupling; [`ot_discrepancy_bruteforce`] enumerates permutation couplings
//! on small uniform instances and is kept as an independent verification
//! oracle for the solver.

mod simplex;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::EmpiricalDistribution;

/// Symmetry / PSD tolerance for quadratic-form weights.
pub const PSD_TOL: f64 = 1e-10;

/// A point map used to pre-compose a cost.
pub type PointMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Pre-composition applied to both arguments before a base cost.
#[derive(Clone)]
pub enum PreMap {
    /// x -> M x. Keeps translation invariance of the base cost.
    Linear(DMatrix<f64>),
    /// Arbitrary point map with a declared input dimension.
    Map { map: PointMap, input_dim: usize },
}

impl PreMap {
    pub fn input_dim(&self) -> usize {
        match self {
            PreMap::Linear(m) => m.ncols(),
            PreMap::Map { input_dim, .. } => *input_dim,
        }
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        match self {
            PreMap::Linear(m) => Ok(m * x),
            PreMap::Map { map, .. } => Ok(map(x)),
        }
    }
}

impl fmt::Debug for PreMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PreMap::Linear(m) => write!(f, "Linear({}x{})", m.nrows(), m.ncols()),
            PreMap::Map { input_dim, .. } => write!(f, "Map(dim {input_dim})"),
        }
    }
}

/// Translation-invariant transportation-cost descriptor.
///
/// * `QuadraticForm`: c(x - y) = (x - y)^T W (x - y), W symmetric PSD.
/// * `ScaledPower`: c(x - y) = scale * ||x - y||_2^power (any dimension).
/// * `MapComposed`: pairwise cost base(phi(x) - phi(y)) for a pre-map phi;
///   arises from pushforwards and is generally not translation-invariant.
#[derive(Clone)]
pub enum TransportCost {
    QuadraticForm {
        weight: DMatrix<f64>,
    },
    ScaledPower {
        power: f64,
        scale: f64,
    },
    MapComposed {
        base: Box<TransportCost>,
        pre: PreMap,
    },
}

impl fmt::Debug for TransportCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportCost::QuadraticForm { weight } => {
                write!(f, "QuadraticForm({}x{})", weight.nrows(), weight.ncols())
            }
            TransportCost::ScaledPower { power, scale } => {
                write!(f, "ScaledPower(p={power}, scale={scale})")
            }
            TransportCost::MapComposed { base, pre } => {
                write!(f, "MapComposed({base:?} o {pre:?})")
            }
        }
    }
}

impl TransportCost {
    /// Quadratic-form cost d^T W d. W must be symmetric within [`PSD_TOL`];
    /// eigenvalues in [-PSD_TOL, 0) are clamped to zero, anything lower is an
    /// error. Degenerate (singular) W is allowed.
    pub fn quadratic(weight: DMatrix<f64>) -> Result<Self> {
        if !weight.is_square() {
            return Err(Error::InvalidMatrix(format!(
                "quadratic form weight must be square, got {}x{}",
                weight.nrows(),
                weight.ncols()
            )));
        }
        if weight.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix(
                "quadratic form weight must be finite".into(),
            ));
        }
        let asym = (&weight - weight.transpose()).abs().max();
        if asym > PSD_TOL {
            return Err(Error::InvalidMatrix(format!(
                "quadratic form weight is asymmetric by {asym}"
            )));
        }
        let sym = (&weight + weight.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if min_eig < -PSD_TOL {
            return Err(Error::InvalidMatrix(format!(
                "quadratic form weight has eigenvalue {min_eig} below -{PSD_TOL}"
            )));
        }
        if min_eig < 0.0 {
            // Clamp the slightly negative spectrum to zero and rebuild.
            let mut vals = eig.eigenvalues.clone();
            for v in vals.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let rebuilt =
                &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
            let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
            return Ok(TransportCost::QuadraticForm { weight: rebuilt });
        }
        Ok(TransportCost::QuadraticForm { weight })
    }

    /// scale * ||d||_2^power with power >= 0 and scale > 0.
    pub fn scaled_power(power: f64, scale: f64) -> Result<Self> {
        if !power.is_finite() || power < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "power must be >= 0, got {power}"
            )));
        }
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "scale must be > 0, got {scale}"
            )));
        }
        Ok(TransportCost::ScaledPower { power, scale })
    }

    /// The squared Euclidean norm ||d||_2^2, the workhorse cost of the
    /// systems layer.
    pub fn sq_norm() -> Self {
        TransportCost::ScaledPower {
            power: 2.0,
            scale: 1.0,
        }
    }

    /// The Euclidean norm ||d||_2.
    pub fn norm() -> Self {
        TransportCost::ScaledPower {
            power: 1.0,
            scale: 1.0,
        }
    }

    /// Pairwise cost base(phi(x) - phi(y)).
    pub fn map_composed(base: TransportCost, pre: PreMap) -> Self {
        TransportCost::MapComposed {
            base: Box::new(base),
            pre,
        }
    }

    /// Input dimension the cost acts on, if pinned by the descriptor.
    /// `ScaledPower` applies in any dimension.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            TransportCost::QuadraticForm { weight } => Some(weight.nrows()),
            TransportCost::ScaledPower { .. } => None,
            TransportCost::MapComposed { pre, .. } => Some(pre.input_dim()),
        }
    }

    /// c(x1, x2) depends only on x1 - x2. True for the two closed-form kinds
    /// and for linear pre-compositions.
    pub fn translation_invariant(&self) -> bool {
        match self {
            TransportCost::QuadraticForm { .. } | TransportCost::ScaledPower { .. } => true,
            TransportCost::MapComposed { base, pre } => {
                matches!(pre, PreMap::Linear(_)) && base.translation_invariant()
            }
        }
    }

    /// Whether orthomonotonicity (with the standard inner product) is
    /// certified for this descriptor.
    pub fn orthomonotone_certified(&self) -> bool {
        matches!(
            self,
            TransportCost::QuadraticForm { .. } | TransportCost::ScaledPower { .. }
        )
    }

    /// Exponent p >= 1 such that c^(1/p) satisfies the triangle inequality,
    /// when certified.
    pub fn triangle_exponent(&self) -> Option<f64> {
        match self {
            TransportCost::QuadraticForm { .. } => Some(2.0),
            TransportCost::ScaledPower { power, .. } if *power >= 1.0 => Some(*power),
            _ => None,
        }
    }

    /// Degree p with c(alpha d) = |alpha|^p c(d), when the descriptor is
    /// homogeneous.
    pub fn homogeneity_degree(&self) -> Option<f64> {
        match self {
            TransportCost::QuadraticForm { .. } => Some(2.0),
            TransportCost::ScaledPower { power, .. } => Some(*power),
            TransportCost::MapComposed { .. } => None,
        }
    }

    /// c(d) > 0 for every d != 0.
    pub fn positive_definite(&self) -> bool {
        match self {
            TransportCost::QuadraticForm { weight } => linalg::rank(weight) == weight.nrows(),
            TransportCost::ScaledPower { power, scale } => *scale > 0.0 && *power > 0.0,
            TransportCost::MapComposed { .. } => false,
        }
    }

    /// Whether the cost is a monotone function of ||d||_2 alone.
    pub fn is_norm_radial(&self) -> bool {
        match self {
            TransportCost::ScaledPower { .. } => true,
            TransportCost::QuadraticForm { weight } => {
                let s = weight[(0, 0)];
                let eye = DMatrix::identity(weight.nrows(), weight.ncols());
                (weight - eye * s).abs().max() <= PSD_TOL
            }
            TransportCost::MapComposed { .. } => false,
        }
    }

    /// Whether the cost equals the plain squared Euclidean norm.
    pub fn is_unscaled_sq_euclidean(&self) -> bool {
        match self {
            TransportCost::ScaledPower { power, scale } => {
                (power - 2.0).abs() <= 1e-12 && (scale - 1.0).abs() <= 1e-12
            }
            TransportCost::QuadraticForm { weight } => {
                let eye = DMatrix::identity(weight.nrows(), weight.ncols());
                (weight - eye).abs().max() <= 1e-12
            }
            TransportCost::MapComposed { .. } => false,
        }
    }

    /// Matrix W with c(d) = d^T W d in dimension `dim`, if the cost is a
    /// quadratic form there.
    pub fn as_quadratic_matrix(&self, dim: usize) -> Option<DMatrix<f64>> {
        match self {
            TransportCost::QuadraticForm { weight } if weight.nrows() == dim => {
                Some(weight.clone())
            }
            TransportCost::ScaledPower { power, scale } if (*power - 2.0).abs() <= 1e-12 => {
                Some(DMatrix::identity(dim, dim) * *scale)
            }
            _ => None,
        }
    }

    /// Structural equality of descriptors (exact field comparison). Function
    /// pre-compositions are never considered equal.
    pub fn descriptor_eq(&self, other: &TransportCost) -> bool {
        match (self, other) {
            (
                TransportCost::QuadraticForm { weight: a },
                TransportCost::QuadraticForm { weight: b },
            ) => a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x == y),
            (
                TransportCost::ScaledPower {
                    power: p1,
                    scale: s1,
                },
                TransportCost::ScaledPower {
                    power: p2,
                    scale: s2,
                },
            ) => p1 == p2 && s1 == s2,
            _ => false,
        }
    }

    /// Pairwise cost evaluation c(x, y).
    pub fn evaluate(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        match self {
            TransportCost::QuadraticForm { weight } => {
                if x.len() != weight.nrows() {
                    return Err(Error::DimensionMismatch {
                        expected: weight.nrows(),
                        got: x.len(),
                    });
                }
                let d = x - y;
                Ok((&d.transpose() * weight * &d)[(0, 0)].max(0.0))
            }
            TransportCost::ScaledPower { power, scale } => {
                let n = (x - y).norm();
                if *power == 0.0 {
                    // 0^0 taken as 0 so that c(x, x) = 0.
                    Ok(if n == 0.0 { 0.0 } else { *scale })
                } else {
                    Ok(scale * n.powf(*power))
                }
            }
            TransportCost::MapComposed { base, pre } => {
                base.evaluate(&pre.apply(x)?, &pre.apply(y)?)
            }
        }
    }

    /// Dense cost matrix c(x_i, y_j). Pre-maps are applied to the supports
    /// once, not per pair.
    pub fn pairwise_matrix(
        &self,
        xs: &[DVector<f64>],
        ys: &[DVector<f64>],
    ) -> Result<DMatrix<f64>> {
        match self {
            TransportCost::MapComposed { base, pre } => {
                let xs2: Result<Vec<_>> = xs.iter().map(|x| pre.apply(x)).collect();
                let ys2: Result<Vec<_>> = ys.iter().map(|y| pre.apply(y)).collect();
                base.pairwise_matrix(&xs2?, &ys2?)
            }
            _ => {
                let mut out = DMatrix::zeros(xs.len(), ys.len());
                for (i, x) in xs.iter().enumerate() {
                    for (j, y) in ys.iter().enumerate() {
                        out[(i, j)] = self.evaluate(x, y)?;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Composition c' = c o M, i.e. c'(d) = c(M d).
///
/// Quadratic forms compose by congruence (M^T W M, re-clamped to PSD).
/// Scaled powers compose only with scalar multiples of isometries
/// (M^T M = alpha^2 I), except that power 2 falls back to the equivalent
/// quadratic form for arbitrary M.
pub fn compose_linear(cost: &TransportCost, m: &DMatrix<f64>) -> Result<TransportCost> {
    match cost {
        TransportCost::QuadraticForm { weight } => {
            if m.nrows() != weight.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: weight.nrows(),
                    got: m.nrows(),
                });
            }
            if m.is_square() && *m == DMatrix::identity(m.nrows(), m.ncols()) {
                return Ok(cost.clone());
            }
            TransportCost::quadratic(m.transpose() * weight * m)
        }
        TransportCost::ScaledPower { power, scale } => {
            if m.is_square() && *m == DMatrix::identity(m.nrows(), m.ncols()) {
                return Ok(cost.clone());
            }
            let gram = m.transpose() * m;
            let alpha_sq = gram.trace() / gram.nrows() as f64;
            let eye = DMatrix::identity(gram.nrows(), gram.ncols());
            let conformal = (&gram - eye * alpha_sq).abs().max() <= PSD_TOL * (1.0 + alpha_sq);
            if conformal && alpha_sq > PSD_TOL {
                let alpha = alpha_sq.sqrt();
                return TransportCost::scaled_power(*power, scale * alpha.powf(*power));
            }
            if (*power - 2.0).abs() <= 1e-12 {
                // ||M d||^2 is the quadratic form with weight scale * M^T M.
                return TransportCost::quadratic(gram * *scale);
            }
            Err(Error::NonConformalMap)
        }
        TransportCost::MapComposed { .. } => Err(Error::CostPrecondition(
            "compose_linear needs a quadratic-form or scaled-power cost".into(),
        )),
    }
}

/// A coupling between two finitely supported distributions: the matrix of
/// transported mass, with its row and column marginals.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    row_weights: Vec<f64>,
    col_weights: Vec<f64>,
    matrix: DMatrix<f64>,
}

impl TransportPlan {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn row_weights(&self) -> &[f64] {
        &self.row_weights
    }

    pub fn col_weights(&self) -> &[f64] {
        &self.col_weights
    }

    /// Largest deviation of a row or column sum from its marginal.
    pub fn max_marginal_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, &w) in self.row_weights.iter().enumerate() {
            worst = worst.max((self.matrix.row(i).sum() - w).abs());
        }
        for (j, &w) in self.col_weights.iter().enumerate() {
            worst = worst.max((self.matrix.column(j).sum() - w).abs());
        }
        worst
    }
}

/// Exact optimal-transport discrepancy between `p` and `q` under `cost`,
/// with the optimal coupling. Deterministic given its inputs. The value is
/// the contract; ties between optimal plans are broken by the solver's pivot
/// order.
pub fn ot_discrepancy(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    cost: &TransportCost,
) -> Result<(f64, TransportPlan)> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    if let Some(d) = cost.input_dim() {
        if d != p.dim() {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.dim(),
            });
        }
    }
    let costs = cost.pairwise_matrix(p.atoms(), q.atoms())?;
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NumericalFailure("non-finite transport cost".into()));
    }
    let (value, matrix) = simplex::solve_transportation(p.weights(), q.weights(), &costs)?;
    let plan = TransportPlan {
        row_weights: p.weights().to_vec(),
        col_weights: q.weights().to_vec(),
        matrix,
    };
    let residual = plan.max_marginal_residual();
    if residual > 1e-8 {
        return Err(Error::NumericalFailure(format!(
            "transport plan marginal residual {residual} exceeds 1e-8"
        )));
    }
    Ok((value, plan))
}

/// Convenience wrapper returning just the discrepancy value.
pub fn ot_discrepancy_value(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    cost: &TransportCost,
) -> Result<f64> {
    ot_discrepancy(p, q, cost).map(|(v, _)| v)
}

const BRUTE_FORCE_MAX: usize = 8;

/// Verification oracle: minimum over all permutation couplings of the
/// average pair cost. Valid for uniform distributions of equal support size,
/// where the transportation LP always has a permutation optimum. Limited to
/// supports of size <= 8.
pub fn ot_discrepancy_bruteforce(
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    cost: &TransportCost,
) -> Result<f64> {
    let n = p.support_size();
    if q.support_size() != n {
        return Err(Error::InvalidParameter(
            "brute-force oracle needs equal support sizes".into(),
        ));
    }
    if n > BRUTE_FORCE_MAX {
        return Err(Error::InvalidParameter(format!(
            "brute-force oracle supports at most {BRUTE_FORCE_MAX} atoms, got {n}"
        )));
    }
    let w = 1.0 / n as f64;
    let uniform = |d: &EmpiricalDistribution| d.weights().iter().all(|&x| (x - w).abs() <= 1e-12);
    if !uniform(p) || !uniform(q) {
        return Err(Error::InvalidParameter(
            "brute-force oracle needs uniform weights".into(),
        ));
    }
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let costs = cost.pairwise_matrix(p.atoms(), q.atoms())?;

    // Heap's algorithm over assignments of rows to columns.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut stack = vec![0usize; n];
    let total = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| costs[(i, j)])
            .sum::<f64>()
            * w
    };
    let mut best = total(&perm);
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            best = best.min(total(&perm));
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// JSON form of a cost descriptor, e.g. `{"kind":"quadratic","W":[[...]]}`.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CostJson {
    Quadratic {
        #[serde(rename = "W")]
        w: Vec<Vec<f64>>,
    },
    ScaledPower {
        power: f64,
        scale: f64,
    },
    /// Emitted for map-composed costs; the pre-map itself is not
    /// serializable, so deserialization rejects this variant.
    MapComposed {
        base: Box<CostJson>,
    },
}

fn cost_to_json(cost: &TransportCost) -> CostJson {
    match cost {
        TransportCost::QuadraticForm { weight } => CostJson::Quadratic {
            w: weight
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        },
        TransportCost::ScaledPower { power, scale } => CostJson::ScaledPower {
            power: *power,
            scale: *scale,
        },
        TransportCost::MapComposed { base, .. } => CostJson::MapComposed {
            base: Box::new(cost_to_json(base)),
        },
    }
}

impl Serialize for TransportCost {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        cost_to_json(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TransportCost {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        match CostJson::deserialize(deserializer)? {
            CostJson::Quadratic { w } => {
                let rows = w.len();
                let cols = w.first().map_or(0, Vec::len);
                if rows == 0 || w.iter().any(|r| r.len() != cols) {
                    return Err(serde::de::Error::custom("ragged or empty weight matrix"));
                }
                let m = DMatrix::from_row_iterator(rows, cols, w.into_iter().flatten());
                TransportCost::quadratic(m).map_err(serde::de::Error::custom)
            }
            CostJson::ScaledPower { power, scale } => {
                TransportCost::scaled_power(power, scale).map_err(serde::de::Error::custom)
            }
            CostJson::MapComposed { .. } => Err(serde::de::Error::custom(
                "map-composed costs cannot be deserialized",
            )),
        }
    }
}
