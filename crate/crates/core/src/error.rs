use thiserror::Error;

/// Errors raised by distribution, transport, and propagation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Two objects that must live in the same space do not.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A distribution needs at least one atom.
    #[error("empty support: a distribution needs at least one atom")]
    EmptySupport,

    /// Weights must be strictly positive.
    #[error("weight {value} at index {index} is not strictly positive")]
    InvalidWeight { index: usize, value: f64 },

    /// Weights must sum to one; deviations are reported, never renormalized.
    #[error("weights sum to {sum}, deviating from 1 by more than {tol}")]
    WeightSum { sum: f64, tol: f64 },

    /// A product-type operation would exceed the configured atom budget.
    #[error("operation needs {required} atoms, exceeding the budget of {budget}")]
    AtomBudget { required: usize, budget: usize },

    /// A matrix fails a structural requirement (symmetry, PSD, stochasticity, ...).
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    /// The transport cost lacks a property the operation needs.
    #[error("cost precondition failed: {0}")]
    CostPrecondition(String),

    /// A scaled-power cost can only be composed with scalar multiples of isometries.
    #[error("scaled-power cost composed with a non-conformal map")]
    NonConformalMap,

    /// The supplied inverse does not invert the map on the observed atoms.
    #[error("inverse verification failed: max residual {max_residual}")]
    InverseCheck { max_residual: f64 },

    /// The surjective-pushforward cost condition failed on sampled atom pairs.
    #[error("cost condition spot check failed: composed cost exceeds original by {excess}")]
    CostCondition { excess: f64 },

    /// A matrix does not have the rank an operation requires.
    #[error("rank deficiency: rank {rank}, required {required}")]
    RankDeficient { rank: usize, required: usize },

    /// A spectral precondition (row-stochasticity, simple unit eigenvalue, ...) failed.
    #[error("spectral precondition failed: {0}")]
    SpectralPrecondition(String),

    /// An iterative routine failed to reach its accuracy contract.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Invalid scalar parameter (radius, gamma, tolerance, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The requested operation is not defined for this input.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
