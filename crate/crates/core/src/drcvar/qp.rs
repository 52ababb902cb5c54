//! Thin wrapper over the dual active-set QP solver for the inner problems:
//! minimize 1/2 x^T diag(h) x + f^T x subject to G x <= rhs.

use crate::error::{Error, Result};

/// Solves the QP; returns `None` when the constraints are infeasible.
/// `h_diag` must be strictly positive (the caller regularizes free variables).
pub(crate) fn solve_diag_qp(
    h_diag: &[f64],
    linear: &[f64],
    rows: &[Vec<f64>],
    rhs: &[f64],
) -> Result<Option<Vec<f64>>> {
    let n = h_diag.len();
    debug_assert_eq!(linear.len(), n);
    debug_assert_eq!(rows.len(), rhs.len());

    let mut qmat = vec![0.0; n * n];
    for (i, &h) in h_diag.iter().enumerate() {
        qmat[i * n + i] = h;
    }
    let mut amat = Vec::with_capacity(rows.len() * n);
    for row in rows {
        debug_assert_eq!(row.len(), n);
        amat.extend_from_slice(row);
    }
    match quadprog::solve_qp(&mut qmat, linear, &amat, rhs, 0, false) {
        Ok(solution) => Ok(Some(solution.sol)),
        Err(quadprog::Error::Infeasible) => Ok(None),
        Err(e) => Err(Error::NumericalFailure(format!("qp solver: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimum() {
        let x = solve_diag_qp(&[2.0, 2.0], &[-2.0, 0.0], &[], &[])
            .unwrap()
            .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!(x[1].abs() < 1e-12);
    }

    #[test]
    fn active_constraint() {
        // min x^2 s.t. x >= 1  (written as -x <= -1)
        let x = solve_diag_qp(&[2.0], &[0.0], &[vec![-1.0]], &[-1.0])
            .unwrap()
            .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_detected() {
        // x <= 0 and x >= 1 cannot hold.
        let out = solve_diag_qp(&[2.0], &[0.0], &[vec![1.0], vec![-1.0]], &[0.0, -1.0]).unwrap();
        assert!(out.is_none());
    }
}
