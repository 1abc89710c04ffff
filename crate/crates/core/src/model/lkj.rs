//! LKJ prior on correlation matrices.

use super::transform::CorrCholesky;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LkjError {
    #[error("LKJ shape must be positive, got {0}")]
    Shape(f64),
    #[error("correlation factor is not positive definite")]
    NotPositiveDefinite,
}

/// Unnormalized LKJ log density `(eta - 1) log det(Sigma)` of the correlation
/// matrix represented by `factor`.
pub fn lkj_log_density(factor: &CorrCholesky, eta: f64) -> Result<f64, LkjError> {
    if !(eta > 0.0) {
        return Err(LkjError::Shape(eta));
    }
    let k = factor.dim();
    if (0..k).any(|i| !(factor.get(i, i) > 0.0)) {
        return Err(LkjError::NotPositiveDefinite);
    }
    if eta == 1.0 {
        return Ok(0.0);
    }
    Ok((eta - 1.0) * factor.log_det_correlation())
}

/// LKJ log density expressed over the Cholesky factor: the correlation-scale
/// density plus the Jacobian of `Sigma = L L^T`.
///
/// Returns the value and writes `d/dL_ii` into `grad_diag` (the diagonal of a
/// correlation factor has no free parameter at row 0).
pub(crate) fn lkj_cholesky_log_density(factor: &CorrCholesky, eta: f64, grad_diag: &mut [f64]) -> f64 {
    let k = factor.dim();
    let mut lp = 0.0;
    for i in 1..k {
        let coef = 2.0 * (eta - 1.0) + (k - i - 1) as f64;
        let d = factor.get(i, i);
        lp += coef * d.ln();
        grad_diag[i] = coef / d;
    }
    lp
}
