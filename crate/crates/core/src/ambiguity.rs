//! Ambiguity sets: balls of probability distributions under an
//! optimal-transport budget, and the calculus that propagates them through
//! linear maps, nonlinear maps, convolutions, and Hadamard products.
//!
//! Each operation returns another ball together with an `exact` flag: `true`
//! when the returned ball is exactly the image of the input ball under the
//! operation, `false` when it is a proven superset. The flag propagates
//! conservatively: an inexact input never produces an exact output.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::{EmpiricalDistribution, DEFAULT_ATOM_BUDGET};
use crate::transport::{compose_linear, ot_discrepancy_value, PointMap, PreMap, TransportCost};

/// Tolerance for inverse verification in nonlinear pushforwards.
pub const INVERSE_TOL: f64 = 1e-9;

/// A ball of distributions: everything the center can be transported onto
/// with budget at most `radius` under `cost`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OTAmbiguitySet {
    center: EmpiricalDistribution,
    radius: f64,
    cost: TransportCost,
    exact: bool,
}

/// Structured pushforward kinds with closed-form propagation rules.
#[derive(Clone, Debug)]
pub enum SpecialTransform {
    /// x -> x + b for translation-invariant costs.
    Translate(DVector<f64>),
    /// x -> alpha x for costs homogeneous of some degree.
    Scale(f64),
    /// x -> R x for an orthogonal R and costs radial in the Euclidean norm.
    Rotate(DMatrix<f64>),
    /// x -> P x for a symmetric idempotent P; yields a superset.
    Project(DMatrix<f64>),
}

/// How a nonlinear map is claimed to behave; governs which inverse check runs
/// and whether the output is exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapMode {
    Bijective,
    Injective,
    Surjective,
}

impl OTAmbiguitySet {
    /// Ball with the given center, radius, and cost, flagged exact.
    pub fn new(center: EmpiricalDistribution, radius: f64, cost: TransportCost) -> Result<Self> {
        Self::with_exactness(center, radius, cost, true)
    }

    /// Ball flagged as a proven superset rather than an exact image.
    pub fn new_superset(
        center: EmpiricalDistribution,
        radius: f64,
        cost: TransportCost,
    ) -> Result<Self> {
        Self::with_exactness(center, radius, cost, false)
    }

    pub fn with_exactness(
        center: EmpiricalDistribution,
        radius: f64,
        cost: TransportCost,
        exact: bool,
    ) -> Result<Self> {
        if !radius.is_finite() || radius < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "radius must be finite and >= 0, got {radius}"
            )));
        }
        if let Some(d) = cost.input_dim() {
            if d != center.dim() {
                return Err(Error::DimensionMismatch {
                    expected: center.dim(),
                    got: d,
                });
            }
        }
        Ok(Self {
            center,
            radius,
            cost,
            exact,
        })
    }

    pub fn center(&self) -> &EmpiricalDistribution {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn cost(&self) -> &TransportCost {
        &self.cost
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    /// Exact transport discrepancy from the center to `q`.
    pub fn discrepancy_to(&self, q: &EmpiricalDistribution) -> Result<f64> {
        ot_discrepancy_value(&self.center, q, &self.cost)
    }

    /// Membership test: discrepancy from the center at most radius + tol.
    pub fn contains(&self, q: &EmpiricalDistribution, tol: f64) -> Result<bool> {
        Ok(self.discrepancy_to(q)? <= self.radius + tol)
    }

    /// Pushforward through x -> A x for translation-invariant, orthomonotone
    /// costs. The image ball keeps the radius, pushes the center, and
    /// composes the cost with the pseudoinverse of A; it is the exact image
    /// iff A has full row rank, otherwise a proven superset.
    pub fn push_linear(&self, a: &DMatrix<f64>) -> Result<Self> {
        if !self.cost.translation_invariant() || !self.cost.orthomonotone_certified() {
            return Err(Error::CostPrecondition(
                "linear pushforward needs a translation-invariant, orthomonotone cost".into(),
            ));
        }
        if a.ncols() != self.center.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.center.dim(),
                got: a.ncols(),
            });
        }
        let a_pinv = linalg::pinv(a);
        let cost = compose_with_fallback(&self.cost, &a_pinv)?;
        let center = self.center.pushforward_linear(a)?;
        let exact = self.exact && linalg::is_full_row_rank(a);
        Self::with_exactness(center, self.radius, cost, exact)
    }

    /// Pushforward through a nonlinear map with a caller-supplied inverse.
    ///
    /// The claimed inverse is verified on the atoms: left inverse for
    /// bijective/injective maps, right inverse on image atoms for surjective
    /// maps. For surjective maps the cost condition
    /// c(f_inv(f(x)), f_inv(f(y))) <= c(x, y) is asserted by sampling atom
    /// pairs; this is a spot check, not a proof.
    pub fn push_nonlinear(&self, f: &PointMap, f_inv: &PointMap, mode: MapMode) -> Result<Self> {
        let atoms = self.center.atoms();
        match mode {
            MapMode::Bijective | MapMode::Injective => {
                let mut worst: f64 = 0.0;
                for x in atoms {
                    let back = f_inv(&f(x));
                    if back.len() != x.len() {
                        return Err(Error::DimensionMismatch {
                            expected: x.len(),
                            got: back.len(),
                        });
                    }
                    worst = worst.max(linalg::max_abs_diff(&back, x));
                }
                if worst > INVERSE_TOL {
                    return Err(Error::InverseCheck {
                        max_residual: worst,
                    });
                }
            }
            MapMode::Surjective => {
                let mut worst: f64 = 0.0;
                for x in atoms {
                    let y = f(x);
                    let again = f(&f_inv(&y));
                    if again.len() != y.len() {
                        return Err(Error::DimensionMismatch {
                            expected: y.len(),
                            got: again.len(),
                        });
                    }
                    worst = worst.max(linalg::max_abs_diff(&again, &y));
                }
                if worst > INVERSE_TOL {
                    return Err(Error::InverseCheck {
                        max_residual: worst,
                    });
                }
                // Spot check of the cost condition on atom pairs.
                let mut excess: f64 = 0.0;
                for (i, x) in atoms.iter().enumerate() {
                    for y in atoms.iter().skip(i + 1) {
                        let direct = self.cost.evaluate(x, y)?;
                        let through = self.cost.evaluate(&f_inv(&f(x)), &f_inv(&f(y)))?;
                        excess = excess.max(through - direct);
                    }
                }
                if excess > INVERSE_TOL {
                    return Err(Error::CostCondition { excess });
                }
            }
        }

        let center = self.center.pushforward(|x| f(x))?;
        let image_dim = center.dim();
        let cost = TransportCost::map_composed(
            self.cost.clone(),
            PreMap::Map {
                map: f_inv.clone(),
                input_dim: image_dim,
            },
        );
        let exact = match mode {
            MapMode::Bijective => self.exact,
            MapMode::Injective | MapMode::Surjective => false,
        };
        Self::with_exactness(center, self.radius, cost, exact)
    }

    /// Closed-form rules for translations, scalings, rotations, and
    /// orthogonal projections.
    pub fn special_transform(&self, transform: &SpecialTransform) -> Result<Self> {
        match transform {
            SpecialTransform::Translate(b) => {
                if !self.cost.translation_invariant() {
                    return Err(Error::CostPrecondition(
                        "translation rule needs a translation-invariant cost".into(),
                    ));
                }
                let center = self.center.translate(b)?;
                Self::with_exactness(center, self.radius, self.cost.clone(), self.exact)
            }
            SpecialTransform::Scale(alpha) => {
                let Some(degree) = self.cost.homogeneity_degree() else {
                    return Err(Error::CostPrecondition(
                        "scaling rule needs a homogeneous cost".into(),
                    ));
                };
                if *alpha == 0.0 {
                    // The image collapses to the point mass at the origin.
                    let center = EmpiricalDistribution::dirac(DVector::zeros(self.center.dim()));
                    let exact = self.exact && self.cost.positive_definite();
                    return Self::with_exactness(center, 0.0, self.cost.clone(), exact);
                }
                let center = self.center.pushforward(|x| x * *alpha)?;
                let radius = alpha.abs().powf(degree) * self.radius;
                Self::with_exactness(center, radius, self.cost.clone(), self.exact)
            }
            SpecialTransform::Rotate(r) => {
                if !self.cost.translation_invariant() || !self.cost.is_norm_radial() {
                    return Err(Error::CostPrecondition(
                        "rotation rule needs a translation-invariant, norm-radial cost".into(),
                    ));
                }
                if !linalg::is_orthogonal(r, 1e-10) {
                    return Err(Error::InvalidMatrix(
                        "rotation matrix must be orthogonal".into(),
                    ));
                }
                let center = self.center.pushforward_linear(r)?;
                Self::with_exactness(center, self.radius, self.cost.clone(), self.exact)
            }
            SpecialTransform::Project(p) => {
                if !self.cost.translation_invariant() || !self.cost.orthomonotone_certified() {
                    return Err(Error::CostPrecondition(
                        "projection rule needs a translation-invariant, orthomonotone cost".into(),
                    ));
                }
                if !linalg::is_orthogonal_projector(p, 1e-10) {
                    return Err(Error::InvalidMatrix(
                        "projection matrix must be symmetric and idempotent".into(),
                    ));
                }
                // An orthogonal projector is its own pseudoinverse.
                let cost = compose_with_fallback(&self.cost, p)?;
                let center = self.center.pushforward_linear(p)?;
                Self::with_exactness(center, self.radius, cost, false)
            }
        }
    }

    /// Sum of two independent uncertain vectors. Requires identical cost
    /// descriptors with a certified triangle exponent p; the result has
    /// center P * Q and radius (eps1^(1/p) + eps2^(1/p))^p.
    ///
    /// The output is a superset except when one set is a zero-radius point
    /// mass, in which case convolution is a translation and exactness is
    /// preserved.
    pub fn convolve(&self, other: &Self) -> Result<Self> {
        self.convolve_within(other, DEFAULT_ATOM_BUDGET)
    }

    pub fn convolve_within(&self, other: &Self, budget: usize) -> Result<Self> {
        if !self.cost.descriptor_eq(&other.cost) {
            return Err(Error::CostPrecondition(
                "convolution needs identical cost descriptors".into(),
            ));
        }
        let Some(p) = self.cost.triangle_exponent() else {
            return Err(Error::CostPrecondition(
                "convolution needs a cost with a triangle exponent".into(),
            ));
        };
        let center = self.center.convolve_within(&other.center, budget)?;
        let radius = if self.radius == 0.0 {
            other.radius
        } else if other.radius == 0.0 {
            self.radius
        } else {
            (self.radius.powf(1.0 / p) + other.radius.powf(1.0 / p)).powf(p)
        };
        let translation_case = (other.radius == 0.0 && other.center.support_size() == 1)
            || (self.radius == 0.0 && self.center.support_size() == 1);
        let singleton_case =
            self.radius == 0.0 && other.radius == 0.0 && self.cost.positive_definite();
        let exact = self.exact && other.exact && (translation_case || singleton_case);
        Self::with_exactness(center, radius, self.cost.clone(), exact)
    }

    /// Element-wise product of two independent uncertain vectors. Only the
    /// unscaled squared-Euclidean cost is certified for the product
    /// inequality, with triangle exponent 2. The radius involves the second
    /// moments of both centers.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.hadamard_within(other, DEFAULT_ATOM_BUDGET)
    }

    pub fn hadamard_within(&self, other: &Self, budget: usize) -> Result<Self> {
        if !self.cost.is_unscaled_sq_euclidean() || !other.cost.is_unscaled_sq_euclidean() {
            return Err(Error::CostPrecondition(
                "hadamard product is certified only for the unscaled squared Euclidean cost".into(),
            ));
        }
        let center = self.center.hadamard_within(&other.center, budget)?;
        let m_self = self.center.second_moment();
        let m_other = other.center.second_moment();
        let (e1, e2) = (self.radius, other.radius);
        let radius = ((e1 * e2).sqrt() + (e1 * m_other).sqrt() + (e2 * m_self).sqrt()).powi(2);
        let exact = e1 == 0.0 && e2 == 0.0 && self.exact && other.exact;
        Self::with_exactness(center, radius, self.cost.clone(), exact)
    }

    /// Draws a certified member of the ball: center atoms are displaced (and
    /// occasionally split) by random directions scaled so that an explicit
    /// coupling bounds the transport cost by `fraction * radius`; the exact
    /// discrepancy is then computed and returned with the member.
    ///
    /// Needs a homogeneous cost. `fraction` in [0, 1].
    pub fn sample_member<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        fraction: f64,
    ) -> Result<(EmpiricalDistribution, f64)> {
        self.sample_member_impl(rng, fraction, true)
    }

    /// Like [`Self::sample_member`] but never splits atoms, so the member
    /// keeps the center's support size.
    pub fn sample_member_displaced<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        fraction: f64,
    ) -> Result<(EmpiricalDistribution, f64)> {
        self.sample_member_impl(rng, fraction, false)
    }

    fn sample_member_impl<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        fraction: f64,
        allow_split: bool,
    ) -> Result<(EmpiricalDistribution, f64)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidParameter(format!(
                "fraction must lie in [0, 1], got {fraction}"
            )));
        }
        let degree = match self.cost.homogeneity_degree() {
            Some(d) if d > 1e-12 => d,
            _ => {
                return Err(Error::Unsupported(
                    "member sampling needs a positively homogeneous cost".into(),
                ))
            }
        };
        let budget = fraction * self.radius;
        if budget == 0.0 {
            return Ok((self.center.clone(), 0.0));
        }

        // Split some atoms, displace every piece.
        let dim = self.center.dim();
        let mut pieces: Vec<(DVector<f64>, f64, DVector<f64>)> = Vec::new();
        for (atom, &w) in self.center.atoms().iter().zip(self.center.weights()) {
            let parts = if allow_split && rng.random_bool(0.3) {
                2
            } else {
                1
            };
            for _ in 0..parts {
                let dir = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0f64));
                pieces.push((atom.clone(), w / parts as f64, dir));
            }
        }
        // The explicit piecewise coupling costs sum w_k c(s * d_k) = s^degree * base.
        let mut base = 0.0;
        let zero = DVector::zeros(dim);
        for (_, w, dir) in &pieces {
            base += w * self.cost.evaluate(dir, &zero)?;
        }
        let scale = if base > 1e-300 {
            (budget / base).powf(1.0 / degree)
        } else {
            1.0
        };
        let atoms: Vec<DVector<f64>> = pieces.iter().map(|(x, _, d)| x + d * scale).collect();
        let weights: Vec<f64> = pieces.iter().map(|&(_, w, _)| w).collect();
        let member = EmpiricalDistribution::new(atoms, weights)?;
        let exact = self.discrepancy_to(&member)?;
        debug_assert!(exact <= budget + 1e-9);
        Ok((member, exact))
    }
}

/// c o M when representable in closed form, otherwise wrapped as a
/// map-composed cost with a linear pre-map (keeps translation invariance).
fn compose_with_fallback(cost: &TransportCost, m: &DMatrix<f64>) -> Result<TransportCost> {
    match compose_linear(cost, m) {
        Ok(c) => Ok(c),
        Err(Error::NonConformalMap) => Ok(TransportCost::map_composed(
            cost.clone(),
            PreMap::Linear(m.clone()),
        )),
        Err(e) => Err(e),
    }
}
