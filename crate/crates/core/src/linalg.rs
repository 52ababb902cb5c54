//! Small dense linear-algebra helpers shared across the crate: Moore-Penrose
//! pseudoinverse, numerical rank, spectral norm, and matrix powers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for the pseudoinverse.
pub const PINV_RTOL: f64 = 1e-12;

/// Relative singular-value cutoff for rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

/// Moore-Penrose pseudoinverse with the default cutoff [`PINV_RTOL`].
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_with(a, PINV_RTOL)
}

/// Moore-Penrose pseudoinverse via SVD. Singular values at or below
/// `rtol * sigma_max` are treated as zero.
pub fn pinv_with(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let sigma_max = svd.singular_values.max();
    let cutoff = rtol * sigma_max;

    // A^+ = V diag(1/sigma_i) U^T over the retained spectrum.
    let mut out = DMatrix::zeros(n, m);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            let col = v_t.row(k).transpose() / s;
            let row = u.column(k).transpose();
            out += col * row;
        }
    }
    out
}

/// Numerical rank: count of singular values above `rtol * sigma_max`.
pub fn rank_with(a: &DMatrix<f64>, rtol: f64) -> usize {
    let sv = a.clone().singular_values();
    let sigma_max = sv.max();
    if sigma_max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rtol * sigma_max).count()
}

pub fn rank(a: &DMatrix<f64>) -> usize {
    rank_with(a, RANK_RTOL)
}

pub fn is_full_row_rank(a: &DMatrix<f64>) -> bool {
    rank(a) == a.nrows()
}

pub fn is_full_column_rank(a: &DMatrix<f64>) -> bool {
    rank(a) == a.ncols()
}

/// Largest singular value.
pub fn sigma_max(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().max()
}

/// Integer matrix power A^t (t >= 0) by repeated squaring.
pub fn matrix_power(a: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::InvalidMatrix(format!(
            "matrix power needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = a.clone();
    let mut exp = t;
    while exp > 0 {
        if exp & 1 == 1 {
            result = &result * &base;
        }
        exp >>= 1;
        if exp > 0 {
            base = &base * &base;
        }
    }
    Ok(result)
}

/// Orthonormal basis check: M^T M = I within `tol`.
pub fn is_orthogonal(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let gram = m.transpose() * m;
    let eye = DMatrix::identity(m.ncols(), m.ncols());
    (gram - eye).abs().max() <= tol
}

/// Symmetric orthogonal projector check: P = P^T and P^2 = P within `tol`.
pub fn is_orthogonal_projector(p: &DMatrix<f64>, tol: f64) -> bool {
    if !p.is_square() {
        return false;
    }
    let sym = (p - p.transpose()).abs().max();
    let idem = (p * p - p).abs().max();
    sym <= tol && idem <= tol
}

/// Max-norm distance between a vector and a target.
pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).abs().max()
}
