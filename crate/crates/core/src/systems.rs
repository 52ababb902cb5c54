//! Uncertainty propagation for dynamical systems: linear time-invariant
//! rollouts with uncertain initial condition, additive noise, multiplicative
//! noise, or both; injective nonlinear dynamics; consensus iterations; and
//! the least-squares estimation error.
//!
//! The state at a horizon is an affine function of the stacked inputs and
//! stacked noise, so the ambiguity calculus applies directly. Stacked
//! vectors are ordered newest block first: the stacked input is
//! [u_{T-1}; ...; u_0], and the block columns of the stacked operators line
//! up with that ordering.

use nalgebra::{DMatrix, DVector};

use crate::ambiguity::{MapMode, OTAmbiguitySet, SpecialTransform};
use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::{EmpiricalDistribution, DEFAULT_ATOM_BUDGET};
use crate::transport::{PointMap, TransportCost};

/// Discrete-time system x_{t+1} = A x_t + B u_t + D w_t.
#[derive(Clone, Debug)]
pub struct LTISystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl LTISystem {
    /// `d` defaults to the identity (noise enters every state directly).
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, d: Option<DMatrix<f64>>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidMatrix(format!(
                "state matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        if b.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.nrows(),
            });
        }
        let d = d.unwrap_or_else(|| DMatrix::identity(n, n));
        if d.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: d.nrows(),
            });
        }
        Ok(Self { a, b, d })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.d.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// One step of the dynamics.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.d * w
    }

    /// Terminal state after stepping through `us` and `ws` (time order
    /// u_0, ..., u_{T-1}).
    pub fn simulate(
        &self,
        x0: &DVector<f64>,
        us: &[DVector<f64>],
        ws: &[DVector<f64>],
    ) -> DVector<f64> {
        assert_eq!(us.len(), ws.len(), "input and noise horizons must agree");
        let mut x = x0.clone();
        for (u, w) in us.iter().zip(ws) {
            x = self.step(&x, u, w);
        }
        x
    }
}

/// A^T together with the stacked input and noise operators
/// [B, AB, ..., A^{T-1}B] and [D, AD, ..., A^{T-1}D].
#[derive(Clone, Debug)]
pub struct StackedOperators {
    pub a_pow: DMatrix<f64>,
    pub b_stack: DMatrix<f64>,
    pub d_stack: DMatrix<f64>,
    pub horizon: usize,
}

impl StackedOperators {
    /// Stacks per-step vectors (time order v_0..v_{T-1}) newest first.
    pub fn stack_time_series(series: &[DVector<f64>]) -> DVector<f64> {
        let block = series.first().map_or(0, |v| v.len());
        let mut out = DVector::zeros(block * series.len());
        for (k, v) in series.iter().rev().enumerate() {
            out.rows_mut(k * block, block).copy_from(v);
        }
        out
    }

    /// Inverse of [`Self::stack_time_series`].
    pub fn unstack_time_series(stacked: &DVector<f64>, block: usize) -> Vec<DVector<f64>> {
        assert_eq!(stacked.len() % block, 0);
        let steps = stacked.len() / block;
        (0..steps)
            .rev()
            .map(|k| DVector::from(stacked.rows(k * block, block)))
            .collect()
    }
}

/// Builds the stacked operators for a horizon T >= 1.
pub fn stack(sys: &LTISystem, horizon: usize) -> Result<StackedOperators> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    let n = sys.state_dim();
    let m = sys.input_dim();
    let r = sys.noise_dim();
    let mut b_stack = DMatrix::zeros(n, m * horizon);
    let mut d_stack = DMatrix::zeros(n, r * horizon);
    let mut a_pow = DMatrix::identity(n, n);
    for k in 0..horizon {
        b_stack.columns_mut(k * m, m).copy_from(&(&a_pow * sys.b()));
        d_stack.columns_mut(k * r, r).copy_from(&(&a_pow * sys.d()));
        a_pow = sys.a() * a_pow;
    }
    Ok(StackedOperators {
        a_pow,
        b_stack,
        d_stack,
        horizon,
    })
}

fn require_sq_euclidean(set: &OTAmbiguitySet, what: &str) -> Result<()> {
    if !set.cost().is_unscaled_sq_euclidean() {
        return Err(Error::CostPrecondition(format!(
            "{what} needs the unscaled squared Euclidean cost"
        )));
    }
    Ok(())
}

fn controlled_shift(ops: &StackedOperators, us: &[DVector<f64>]) -> Result<DVector<f64>> {
    if us.len() != ops.horizon {
        return Err(Error::DimensionMismatch {
            expected: ops.horizon,
            got: us.len(),
        });
    }
    let stacked = StackedOperators::stack_time_series(us);
    if stacked.len() != ops.b_stack.ncols() {
        return Err(Error::DimensionMismatch {
            expected: ops.b_stack.ncols(),
            got: stacked.len(),
        });
    }
    Ok(&ops.b_stack * stacked)
}

/// Deterministic rollout with uncertain initial condition: the state law at
/// time `t` lives in a ball around the shifted pushforward of the initial
/// center, with cost composed with the pseudoinverse of A^t. Exact iff A^t
/// has full row rank.
pub fn propagate_initial(
    sys: &LTISystem,
    s0: &OTAmbiguitySet,
    us: &[DVector<f64>],
    t: usize,
) -> Result<OTAmbiguitySet> {
    require_sq_euclidean(s0, "initial-condition propagation")?;
    if s0.center().dim() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.state_dim(),
            got: s0.center().dim(),
        });
    }
    let ops = stack(sys, t)?;
    let shift = controlled_shift(&ops, us)?;
    let pushed = s0.push_linear(&ops.a_pow)?;
    pushed.special_transform(&SpecialTransform::Translate(shift))
}

/// Additive-noise propagation: the noise-trajectory ball (over R^{rT},
/// stacked newest first) maps through the stacked noise operator and is
/// shifted by the controlled rollout of x0. Exact iff the stacked operator
/// has full row rank.
pub fn propagate_additive(
    sys: &LTISystem,
    x0: &DVector<f64>,
    us: &[DVector<f64>],
    s_noise: &OTAmbiguitySet,
    horizon: usize,
) -> Result<OTAmbiguitySet> {
    require_sq_euclidean(s_noise, "additive-noise propagation")?;
    if x0.len() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.state_dim(),
            got: x0.len(),
        });
    }
    let ops = stack(sys, horizon)?;
    if s_noise.center().dim() != ops.d_stack.ncols() {
        return Err(Error::DimensionMismatch {
            expected: ops.d_stack.ncols(),
            got: s_noise.center().dim(),
        });
    }
    let shift = controlled_shift(&ops, us)? + &ops.a_pow * x0;
    let pushed = s_noise.push_linear(&ops.d_stack)?;
    pushed.special_transform(&SpecialTransform::Translate(shift))
}

/// Multiplicative-noise propagation for
/// x_{t+1} = w1 . (A x_t) + w2 . (B u_t), with independent per-step noise
/// vectors drawn from balls around P1 and P2.
///
/// Center and radius follow the Hadamard/convolution recursion; the support
/// of the center multiplies by |P1| * |P2| every step, so the atom budget is
/// enforced and `on_step` reports progress after each completed step.
#[allow(clippy::too_many_arguments)]
pub fn propagate_multiplicative_with<F>(
    sys: &LTISystem,
    x0: &DVector<f64>,
    us: &[DVector<f64>],
    s1: &OTAmbiguitySet,
    s2: &OTAmbiguitySet,
    horizon: usize,
    budget: usize,
    mut on_step: F,
) -> Result<OTAmbiguitySet>
where
    F: FnMut(usize),
{
    require_sq_euclidean(s1, "multiplicative propagation")?;
    require_sq_euclidean(s2, "multiplicative propagation")?;
    let n = sys.state_dim();
    for set in [s1, s2] {
        if set.center().dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: set.center().dim(),
            });
        }
    }
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    if us.len() != horizon || horizon == 0 {
        return Err(Error::InvalidParameter(format!(
            "need horizon >= 1 inputs, got {} for horizon {horizon}",
            us.len()
        )));
    }

    let sigma_a = linalg::sigma_max(sys.a());
    let m1 = s1.center().second_moment();
    let (e1, e2) = (s1.radius(), s2.radius());

    let mut center = EmpiricalDistribution::dirac(x0.clone());
    let mut rho = 0.0f64;
    for (t, u) in us.iter().enumerate() {
        let pushed = center.pushforward_linear(sys.a())?;
        let m_pushed = pushed.second_moment();
        let bu = sys.b() * u;
        let state_part = s1.center().hadamard_within(&pushed, budget)?;
        let input_part = s2
            .center()
            .hadamard_within(&EmpiricalDistribution::dirac(bu.clone()), budget)?;
        center = state_part.convolve_within(&input_part, budget)?;
        rho = ((e1 * rho).sqrt() * sigma_a
            + (rho * m1).sqrt() * sigma_a
            + (e1 * m_pushed).sqrt()
            + e2.sqrt() * bu.norm())
        .powi(2);
        on_step(t + 1);
    }
    OTAmbiguitySet::with_exactness(center, rho, TransportCost::sq_norm(), false)
}

pub fn propagate_multiplicative(
    sys: &LTISystem,
    x0: &DVector<f64>,
    us: &[DVector<f64>],
    s1: &OTAmbiguitySet,
    s2: &OTAmbiguitySet,
    horizon: usize,
) -> Result<OTAmbiguitySet> {
    propagate_multiplicative_with(sys, x0, us, s1, s2, horizon, DEFAULT_ATOM_BUDGET, |_| {})
}

/// Combined initial-condition and additive-noise uncertainty, folded into a
/// single plain-cost ball around the convolved centers with radius
/// (sqrt(eps1)/sigma_max(A^T) + sqrt(eps2)/sigma_max(D_stack))^2.
///
/// This is a superposition bound, not a tight set; membership should be
/// validated by Monte-Carlo when it matters.
pub fn propagate_combined(
    sys: &LTISystem,
    s0: &OTAmbiguitySet,
    s_noise: &OTAmbiguitySet,
    us: &[DVector<f64>],
    horizon: usize,
) -> Result<OTAmbiguitySet> {
    require_sq_euclidean(s0, "combined propagation")?;
    require_sq_euclidean(s_noise, "combined propagation")?;
    let ops = stack(sys, horizon)?;
    if s0.center().dim() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.state_dim(),
            got: s0.center().dim(),
        });
    }
    if s_noise.center().dim() != ops.d_stack.ncols() {
        return Err(Error::DimensionMismatch {
            expected: ops.d_stack.ncols(),
            got: s_noise.center().dim(),
        });
    }
    let sigma_a = linalg::sigma_max(&ops.a_pow);
    let sigma_d = linalg::sigma_max(&ops.d_stack);
    if sigma_a <= 0.0 || sigma_d <= 0.0 {
        return Err(Error::InvalidParameter(
            "combined propagation needs nonzero A^T and stacked noise operator".into(),
        ));
    }
    let shift = controlled_shift(&ops, us)?;
    let center = s0
        .center()
        .pushforward_linear(&ops.a_pow)?
        .translate(&shift)?
        .convolve(&s_noise.center().pushforward_linear(&ops.d_stack)?)?;
    let radius = (s0.radius().sqrt() / sigma_a + s_noise.radius().sqrt() / sigma_d).powi(2);
    OTAmbiguitySet::with_exactness(center, radius, TransportCost::sq_norm(), false)
}

/// Injective nonlinear dynamics x_{t+1} = f(x_t): `t` pushforwards with the
/// supplied left inverse. The result is an inclusion (not exact).
pub fn propagate_nonlinear(
    f: &PointMap,
    f_inv: &PointMap,
    s0: &OTAmbiguitySet,
    t: usize,
) -> Result<OTAmbiguitySet> {
    let mut set = s0.clone();
    for _ in 0..t {
        set = set.push_nonlinear(f, f_inv, MapMode::Injective)?;
    }
    Ok(set)
}

/// Result of [`consensus_limit`]: the scalar consensus value w^T x_0 carries
/// all the uncertainty; `lift` reconstructs the n-dimensional consensus law.
#[derive(Clone, Debug)]
pub struct ConsensusOutcome {
    /// 1-D ambiguity set for the consensus scalar.
    pub set: OTAmbiguitySet,
    /// Left eigenvector of A at eigenvalue 1, normalized to sum 1.
    pub weights: DVector<f64>,
    /// Whether the doubly-stochastic shortcut (radius eps / n) applied.
    pub doubly_stochastic: bool,
}

impl ConsensusOutcome {
    /// Lift a consensus scalar back to the n-dimensional consensus state.
    pub fn lift(&self, value: f64) -> DVector<f64> {
        DVector::from_element(self.weights.len(), value)
    }

    /// Lift a 1-D law to the n-dimensional consensus law.
    pub fn lift_distribution(&self, law: &EmpiricalDistribution) -> Result<EmpiricalDistribution> {
        if law.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: law.dim(),
            });
        }
        law.pushforward(|x| self.lift(x[0]))
    }
}

const STOCHASTIC_TOL: f64 = 1e-9;

/// Uncertainty of the consensus value reached by x_{t+1} = A x_t.
///
/// Preconditions: A row-stochastic within 1e-9; eigenvalue 1 simple and all
/// other eigenvalues strictly inside the unit circle (margin 1e-9). The left
/// eigenvector is recovered from the SVD null space of A^T - I and
/// normalized to sum 1; for doubly stochastic A it is 1/n exactly and the
/// radius specializes to eps / n.
pub fn consensus_limit(a: &DMatrix<f64>, s0: &OTAmbiguitySet) -> Result<ConsensusOutcome> {
    require_sq_euclidean(s0, "consensus propagation")?;
    if !a.is_square() {
        return Err(Error::InvalidMatrix(
            "consensus matrix must be square".into(),
        ));
    }
    let n = a.nrows();
    if s0.center().dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: s0.center().dim(),
        });
    }
    for i in 0..n {
        let row_sum: f64 = a.row(i).sum();
        if (row_sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::SpectralPrecondition(format!(
                "row {i} sums to {row_sum}, not 1"
            )));
        }
        if a.row(i).iter().any(|&x| x < -STOCHASTIC_TOL) {
            return Err(Error::SpectralPrecondition(format!(
                "row {i} has negative entries"
            )));
        }
    }

    let eigenvalues = a.clone().complex_eigenvalues();
    let mut unit_count = 0usize;
    for lambda in eigenvalues.iter() {
        let dist_to_one = ((lambda.re - 1.0).powi(2) + lambda.im.powi(2)).sqrt();
        if dist_to_one <= 1e-8 {
            unit_count += 1;
        } else if lambda.norm() >= 1.0 - 1e-9 {
            return Err(Error::SpectralPrecondition(format!(
                "eigenvalue {lambda} is not strictly inside the unit circle"
            )));
        }
    }
    if unit_count != 1 {
        return Err(Error::SpectralPrecondition(format!(
            "eigenvalue 1 must be simple, found multiplicity {unit_count}"
        )));
    }

    let doubly_stochastic = (0..n).all(|j| (a.column(j).sum() - 1.0).abs() <= STOCHASTIC_TOL);
    let (weights, radius) = if doubly_stochastic {
        let w = DVector::from_element(n, 1.0 / n as f64);
        (w, s0.radius() / n as f64)
    } else {
        // Null space of A^T - I via the smallest right singular vector.
        let m = a.transpose() - DMatrix::identity(n, n);
        let svd = m.clone().svd(true, true);
        let v_t = svd.v_t.as_ref().expect("svd with v_t");
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .map(|(i, _)| i)
            .expect("nonempty spectrum");
        let mut w: DVector<f64> = v_t.row(smallest).transpose();
        let residual = (&m * &w).norm();
        if residual > 1e-8 {
            return Err(Error::SpectralPrecondition(format!(
                "left eigenvector residual {residual}"
            )));
        }
        let total = w.sum();
        if total.abs() < 1e-12 {
            return Err(Error::SpectralPrecondition(
                "left eigenvector cannot be normalized to sum 1".into(),
            ));
        }
        w /= total;
        let radius = s0.radius() * w.norm_squared();
        (w, radius)
    };

    let w_row = weights.clone();
    let center = s0
        .center()
        .pushforward(|x| DVector::from_vec(vec![w_row.dot(x)]))?;
    let set =
        OTAmbiguitySet::with_exactness(center, radius, TransportCost::sq_norm(), s0.is_exact())?;
    Ok(ConsensusOutcome {
        set,
        weights,
        doubly_stochastic,
    })
}

/// Distribution of the least-squares estimation error: with measurements
/// y = A x + z and the noise law in a ball around an empirical distribution,
/// the error x_hat - x equals A^+ z, so the ball pushes through A^+. The
/// composed cost is the quadratic form with weight A^T A and the propagation
/// is exact (A^+ has full row rank). A must have full column rank.
pub fn ols_error_set(a: &DMatrix<f64>, s_noise: &OTAmbiguitySet) -> Result<OTAmbiguitySet> {
    require_sq_euclidean(s_noise, "least-squares propagation")?;
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::InvalidMatrix(format!(
            "need at least as many measurements as parameters, got {m}x{n}"
        )));
    }
    let rank = linalg::rank(a);
    if rank < n {
        return Err(Error::RankDeficient { rank, required: n });
    }
    if s_noise.center().dim() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: s_noise.center().dim(),
        });
    }
    s_noise.push_linear(&linalg::pinv(a))
}

/// i.i.d. measurement noise: expands a 1-D noise ball of radius eps into the
/// m-fold product ball of radius m * eps, then propagates through the
/// estimator.
pub fn ols_error_set_iid(a: &DMatrix<f64>, s_noise_1d: &OTAmbiguitySet) -> Result<OTAmbiguitySet> {
    if s_noise_1d.center().dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: s_noise_1d.center().dim(),
        });
    }
    require_sq_euclidean(s_noise_1d, "least-squares propagation")?;
    let m = a.nrows();
    let product_center = s_noise_1d.center().product_iid(m)?;
    let product = OTAmbiguitySet::with_exactness(
        product_center,
        crate::measures::product_radius(s_noise_1d.radius(), m),
        TransportCost::sq_norm(),
        false,
    )?;
    ols_error_set(a, &product)
}

#[cfg(test)]
mod tests;
