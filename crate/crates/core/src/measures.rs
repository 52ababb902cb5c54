//! Finitely supported probability distributions and their elementary
//! transforms: pushforward, convolution, Hadamard product, i.i.d. products.
//!
//! Distributions are immutable after construction. Coincident atoms are kept
//! separate (no implicit merging); use [`EmpiricalDistribution::coalesce`] to
//! merge explicitly. Operations that multiply support sizes are guarded by an
//! atom budget and fail loudly instead of subsampling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the support size produced by convolution, Hadamard
/// products, and i.i.d. products.
pub const DEFAULT_ATOM_BUDGET: usize = 1_000_000;

/// Allowed deviation of the weight sum from one. Larger deviations are an
/// error; weights are never silently renormalized.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// A finitely supported probability distribution on R^n.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDistribution {
    dim: usize,
    atoms: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl EmpiricalDistribution {
    /// Builds a distribution from atoms and weights, validating that weights
    /// are strictly positive and sum to one within [`WEIGHT_SUM_TOL`].
    pub fn new(atoms: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptySupport);
        }
        if atoms.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: atoms.len(),
                got: weights.len(),
            });
        }
        let dim = atoms[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "atoms must have dimension >= 1".into(),
            ));
        }
        for atom in &atoms {
            if atom.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: atom.len(),
                });
            }
            if atom.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(
                    "atom coordinates must be finite".into(),
                ));
            }
        }
        let mut sum = 0.0;
        for (index, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidWeight { index, value: w });
            }
            sum += w;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::WeightSum {
                sum,
                tol: WEIGHT_SUM_TOL,
            });
        }
        Ok(Self {
            dim,
            atoms,
            weights,
        })
    }

    /// Uniform distribution over the given atoms.
    pub fn uniform(atoms: Vec<DVector<f64>>) -> Result<Self> {
        let n = atoms.len();
        if n == 0 {
            return Err(Error::EmptySupport);
        }
        let w = 1.0 / n as f64;
        Self::new(atoms, vec![w; n])
    }

    /// Point mass at `point`.
    pub fn dirac(point: DVector<f64>) -> Self {
        let dim = point.len();
        assert!(dim > 0, "dirac needs a nonempty point");
        Self {
            dim,
            atoms: vec![point],
            weights: vec![1.0],
        }
    }

    /// 1-D helper: distribution from scalar atoms.
    pub fn from_scalars(values: &[f64], weights: Option<&[f64]>) -> Result<Self> {
        let atoms = values.iter().map(|&v| DVector::from_vec(vec![v])).collect();
        match weights {
            Some(w) => Self::new(atoms, w.to_vec()),
            None => Self::uniform(atoms),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of atoms in the support (duplicates counted).
    pub fn support_size(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[DVector<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Law of f(x): atoms are mapped, weights are unchanged. All images must
    /// share one dimension.
    pub fn pushforward<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let mut mapped = Vec::with_capacity(self.atoms.len());
        let mut out_dim = None;
        for atom in &self.atoms {
            let image = f(atom);
            match out_dim {
                None => {
                    if image.is_empty() {
                        return Err(Error::InvalidParameter(
                            "map produced an empty point".into(),
                        ));
                    }
                    out_dim = Some(image.len());
                }
                Some(d) => {
                    if image.len() != d {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            got: image.len(),
                        });
                    }
                }
            }
            if image.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericalFailure(
                    "map produced a non-finite coordinate".into(),
                ));
            }
            mapped.push(image);
        }
        Ok(Self {
            dim: out_dim.unwrap(),
            atoms: mapped,
            weights: self.weights.clone(),
        })
    }

    /// Pushforward through the linear map x -> A x.
    pub fn pushforward_linear(&self, a: &DMatrix<f64>) -> Result<Self> {
        if a.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: a.ncols(),
            });
        }
        self.pushforward(|x| a * x)
    }

    /// Translated copy: every atom shifted by `shift`.
    pub fn translate(&self, shift: &DVector<f64>) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: shift.len(),
            });
        }
        self.pushforward(|x| x + shift)
    }

    /// Law of the sum of independent draws: atoms `x_i + y_j`, weights
    /// `w_i * v_j`. Uses the default atom budget.
    pub fn convolve(&self, other: &Self) -> Result<Self> {
        self.convolve_within(other, DEFAULT_ATOM_BUDGET)
    }

    pub fn convolve_within(&self, other: &Self, budget: usize) -> Result<Self> {
        self.product_op(other, budget, |x, y| x + y)
    }

    /// Law of the element-wise product of independent draws.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.hadamard_within(other, DEFAULT_ATOM_BUDGET)
    }

    pub fn hadamard_within(&self, other: &Self, budget: usize) -> Result<Self> {
        self.product_op(other, budget, |x, y| x.component_mul(y))
    }

    fn product_op<F>(&self, other: &Self, budget: usize, op: F) -> Result<Self>
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let required =
            self.atoms
                .len()
                .checked_mul(other.atoms.len())
                .ok_or(Error::AtomBudget {
                    required: usize::MAX,
                    budget,
                })?;
        if required > budget {
            return Err(Error::AtomBudget { required, budget });
        }
        let mut atoms = Vec::with_capacity(required);
        let mut weights = Vec::with_capacity(required);
        for (x, wx) in self.atoms.iter().zip(&self.weights) {
            for (y, wy) in other.atoms.iter().zip(&other.weights) {
                atoms.push(op(x, y));
                weights.push(wx * wy);
            }
        }
        Ok(Self {
            dim: self.dim,
            atoms,
            weights,
        })
    }

    /// Second moment: sum of w_i ||x_i||_2^2.
    pub fn second_moment(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * x.norm_squared())
            .sum()
    }

    /// Weighted mean of the atoms.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for (x, w) in self.atoms.iter().zip(&self.weights) {
            m += x * *w;
        }
        m
    }

    /// t-fold product distribution on R^{dim * copies}: atoms are all
    /// concatenations of `copies` atoms, weights are products.
    ///
    /// The companion radius rule for ambiguity sets is
    /// [`product_radius`]: a ball of radius eps around this center becomes a
    /// ball of radius `copies * eps` around the product for separable costs.
    pub fn product_iid(&self, copies: usize) -> Result<Self> {
        self.product_iid_within(copies, DEFAULT_ATOM_BUDGET)
    }

    pub fn product_iid_within(&self, copies: usize, budget: usize) -> Result<Self> {
        if copies == 0 {
            return Err(Error::InvalidParameter(
                "product needs at least one copy".into(),
            ));
        }
        let n = self.atoms.len();
        let mut required: usize = 1;
        for _ in 0..copies {
            required = required.checked_mul(n).ok_or(Error::AtomBudget {
                required: usize::MAX,
                budget,
            })?;
            if required > budget {
                return Err(Error::AtomBudget { required, budget });
            }
        }

        let out_dim = self.dim * copies;
        let mut atoms = Vec::with_capacity(required);
        let mut weights = Vec::with_capacity(required);
        let mut index = vec![0usize; copies];
        loop {
            let mut atom = DVector::zeros(out_dim);
            let mut weight = 1.0;
            for (slot, &i) in index.iter().enumerate() {
                atom.rows_mut(slot * self.dim, self.dim)
                    .copy_from(&self.atoms[i]);
                weight *= self.weights[i];
            }
            atoms.push(atom);
            weights.push(weight);

            // Odometer increment over the index tuple.
            let mut carry = copies;
            while carry > 0 {
                index[carry - 1] += 1;
                if index[carry - 1] < n {
                    break;
                }
                index[carry - 1] = 0;
                carry -= 1;
            }
            if carry == 0 {
                break;
            }
        }
        Ok(Self {
            dim: out_dim,
            atoms,
            weights,
        })
    }

    /// Merges atoms within `tol` of each other (max-norm) and sums their
    /// weights. Representative point is the first atom of each group.
    pub fn coalesce(&self, tol: f64) -> Self {
        let mut atoms: Vec<DVector<f64>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        'outer: for (x, &w) in self.atoms.iter().zip(&self.weights) {
            for (y, wy) in atoms.iter().zip(weights.iter_mut()) {
                if (x - y).abs().max() <= tol {
                    *wy += w;
                    continue 'outer;
                }
            }
            atoms.push(x.clone());
            weights.push(w);
        }
        Self {
            dim: self.dim,
            atoms,
            weights,
        }
    }
}

/// Radius rule accompanying [`EmpiricalDistribution::product_iid`]: a ball of
/// radius `radius` around P yields a ball of radius `copies * radius` around
/// the product distribution (separable costs).
pub fn product_radius(radius: f64, copies: usize) -> f64 {
    radius * copies as f64
}

/// JSON form: `{"dim": n, "atoms": [[...]], "weights": [...]}`. Weights are
/// optional on input (uniform assumed).
#[derive(Serialize, Deserialize)]
struct DistributionJson {
    dim: usize,
    atoms: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

impl Serialize for EmpiricalDistribution {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        DistributionJson {
            dim: self.dim,
            atoms: self
                .atoms
                .iter()
                .map(|a| a.iter().copied().collect())
                .collect(),
            weights: Some(self.weights.clone()),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EmpiricalDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let raw = DistributionJson::deserialize(deserializer)?;
        let atoms: Vec<DVector<f64>> = raw.atoms.into_iter().map(DVector::from_vec).collect();
        if atoms.iter().any(|a| a.len() != raw.dim) {
            return Err(serde::de::Error::custom(
                "atom dimension does not match `dim`",
            ));
        }
        let dist = match raw.weights {
            Some(w) => EmpiricalDistribution::new(atoms, w),
            None => EmpiricalDistribution::uniform(atoms),
        };
        dist.map_err(serde::de::Error::custom)
    }
}
