//! Maps between constrained parameters and unconstrained reals.
//!
//! Positive scales use `x = exp(u)` (log-Jacobian `u`). Cholesky factors of
//! correlation matrices use the canonical partial-correlation construction:
//! each free entry passes through `tanh` and rows are filled so they keep unit
//! Euclidean norm.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("value {0} is not strictly positive")]
    NotPositive(f64),
    #[error("matrix is not a valid correlation Cholesky factor: {0}")]
    InvalidFactor(String),
    #[error("round trip mismatch {0:e} exceeds tolerance")]
    RoundTrip(f64),
}

pub fn positive_constrain(u: f64) -> f64 {
    u.exp()
}

pub fn positive_unconstrain(x: f64) -> Result<f64, TransformError> {
    if x > 0.0 && x.is_finite() {
        Ok(x.ln())
    } else {
        Err(TransformError::NotPositive(x))
    }
}

/// Number of free parameters of a `k x k` correlation factor.
pub fn corr_free_len(k: usize) -> usize {
    k * (k.saturating_sub(1)) / 2
}

/// Lower-triangular Cholesky factor of a correlation matrix, stored dense
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrCholesky {
    k: usize,
    l: Vec<f64>,
}

impl CorrCholesky {
    pub fn identity(k: usize) -> Self {
        let mut l = vec![0.0; k * k];
        for i in 0..k {
            l[i * k + i] = 1.0;
        }
        Self { k, l }
    }

    /// Validates unit row norms, positive diagonal and zero upper triangle.
    pub fn from_dense(k: usize, l: Vec<f64>) -> Result<Self, TransformError> {
        if l.len() != k * k {
            return Err(TransformError::InvalidFactor(format!("expected {} entries", k * k)));
        }
        for i in 0..k {
            if l[i * k + i] <= 0.0 {
                return Err(TransformError::InvalidFactor(format!("diagonal {i} not positive")));
            }
            if (i + 1..k).any(|j| l[i * k + j] != 0.0) {
                return Err(TransformError::InvalidFactor(format!("row {i} has upper entries")));
            }
            let norm: f64 = (0..=i).map(|j| l[i * k + j].powi(2)).sum();
            if (norm - 1.0).abs() > 1e-8 {
                return Err(TransformError::InvalidFactor(format!("row {i} has norm^2 {norm}")));
            }
        }
        Ok(Self { k, l })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.k + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.l
    }

    /// Correlation matrix `L L^T`, row-major.
    pub fn correlation(&self) -> Vec<f64> {
        let k = self.k;
        let mut s = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..=i {
                let v: f64 = (0..=j).map(|m| self.l[i * k + m] * self.l[j * k + m]).sum();
                s[i * k + j] = v;
                s[j * k + i] = v;
            }
        }
        s
    }

    pub fn log_det_correlation(&self) -> f64 {
        2.0 * (0..self.k).map(|i| self.l[i * self.k + i].ln()).sum::<f64>()
    }
}

/// Builds the factor from `corr_free_len(k)` unconstrained values and returns
/// it with the log-Jacobian of the map onto the free factor entries.
pub fn corr_cholesky_constrain(y: &[f64], k: usize) -> (CorrCholesky, f64) {
    debug_assert_eq!(y.len(), corr_free_len(k));
    let mut l = vec![0.0; k * k];
    let mut log_jac = 0.0;
    let mut idx = 0;
    if k > 0 {
        l[0] = 1.0;
    }
    for i in 1..k {
        let mut remaining: f64 = 1.0;
        for j in 0..i {
            let z = y[idx].tanh();
            idx += 1;
            l[i * k + j] = z * remaining.sqrt();
            log_jac += log1m_tanh_sq(y[idx - 1]) + 0.5 * remaining.ln();
            remaining *= 1.0 - z * z;
        }
        l[i * k + i] = remaining.sqrt();
    }
    (CorrCholesky { k, l }, log_jac)
}

/// `log(1 - tanh(y)^2) = log(sech(y)^2)`, stable for large `|y|`.
fn log1m_tanh_sq(y: f64) -> f64 {
    let a = y.abs();
    // log sech^2(a) = 2 (log 2 - a - log(1 + exp(-2a)))
    2.0 * (std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p())
}

pub fn corr_cholesky_unconstrain(factor: &CorrCholesky) -> Result<Vec<f64>, TransformError> {
    let k = factor.k;
    let mut y = Vec::with_capacity(corr_free_len(k));
    for i in 1..k {
        let mut remaining: f64 = 1.0;
        for j in 0..i {
            let lij = factor.get(i, j);
            let z = lij / remaining.sqrt();
            if !(z.abs() < 1.0) {
                return Err(TransformError::InvalidFactor(format!(
                    "partial correlation {z} at ({i},{j}) outside (-1, 1)"
                )));
            }
            y.push(z.atanh());
            remaining -= lij * lij;
        }
    }
    Ok(y)
}

/// Reverse-mode chain rule through [`corr_cholesky_constrain`].
///
/// `grad_l` holds derivatives with respect to every dense factor entry; the
/// contributions are added into `grad_y`. When `with_jacobian` is set the
/// gradient of the log-Jacobian is added as well.
pub fn corr_cholesky_backprop(
    y: &[f64],
    factor: &CorrCholesky,
    grad_l: &[f64],
    grad_y: &mut [f64],
    with_jacobian: bool,
) {
    let k = factor.k;
    let mut idx = 0;
    for i in 1..k {
        // tail[j] = sum_{m > j, m <= i} g_{im} L_{im}
        let row_gl: Vec<f64> = (0..=i).map(|m| grad_l[i * k + m] * factor.get(i, m)).collect();
        let mut tail = vec![0.0; i + 1];
        let mut acc = 0.0;
        for m in (0..=i).rev() {
            tail[m] = acc;
            acc += row_gl[m];
        }
        let mut remaining: f64 = 1.0;
        for j in 0..i {
            let z = y[idx].tanh();
            let g = grad_l[i * k + j] * (1.0 - z * z) * remaining.sqrt() - z * tail[j];
            grad_y[idx] += g;
            if with_jacobian {
                // d/dy_j [log(1 - z_j^2) + 0.5 sum_{m > j, m < i} log(1 - z_j^2)]
                grad_y[idx] += -2.0 * z - z * (i - 1 - j) as f64;
            }
            remaining *= 1.0 - z * z;
            idx += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn positive_identity_point() {
        assert_eq!(positive_constrain(0.0), 1.0);
        assert_eq!(positive_unconstrain(1.0).unwrap(), 0.0);
        assert!(positive_unconstrain(0.0).is_err());
        assert!(positive_unconstrain(-1.0).is_err());
    }

    #[test]
    fn two_by_two_is_tanh() {
        let (f, lj) = corr_cholesky_constrain(&[0.0], 2);
        assert_eq!(f, CorrCholesky::identity(2));
        assert_eq!(lj, 0.0);
        let (f, _) = corr_cholesky_constrain(&[0.7], 2);
        assert_abs_diff_eq!(f.correlation()[1], 0.7f64.tanh(), epsilon = 1e-15);
    }

    #[test]
    fn rows_have_unit_norm() {
        let y = [0.3, -1.2, 2.0, 0.1, -0.4, 0.9];
        let (f, _) = corr_cholesky_constrain(&y, 4);
        assert!(CorrCholesky::from_dense(4, f.as_slice().to_vec()).is_ok());
        let s = f.correlation();
        for i in 0..4 {
            assert_abs_diff_eq!(s[i * 4 + i], 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn log1m_tanh_sq_stable() {
        for y in [-30.0, -2.0, 0.0, 0.5, 3.0, 400.0] {
            let direct = (1.0 - f64::tanh(y).powi(2)).ln();
            if direct.is_finite() && y.abs() < 10.0 {
                assert_abs_diff_eq!(log1m_tanh_sq(y), direct, epsilon = 1e-12);
            }
            assert!(log1m_tanh_sq(y).is_finite());
        }
    }

    fn objective(y: &[f64], k: usize, weights: &[f64]) -> f64 {
        let (f, lj) = corr_cholesky_constrain(y, k);
        f.as_slice().iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + lj
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let k = 4;
        let y = [0.3, -1.2, 0.8, 0.1, -0.4, 0.9];
        let weights: Vec<f64> = (0..k * k).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let (f, _) = corr_cholesky_constrain(&y, k);
        let mut g = vec![0.0; y.len()];
        corr_cholesky_backprop(&y, &f, &weights, &mut g, true);
        let h = 1e-6;
        for i in 0..y.len() {
            let mut yp = y;
            let mut ym = y;
            yp[i] += h;
            ym[i] -= h;
            let fd = (objective(&yp, k, &weights) - objective(&ym, k, &weights)) / (2.0 * h);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-7);
        }
    }

    proptest! {
        #[test]
        fn corr_round_trip(y in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let (f, _) = corr_cholesky_constrain(&y, 4);
            let back = corr_cholesky_unconstrain(&f).unwrap();
            let (f2, _) = corr_cholesky_constrain(&back, 4);
            for (a, b) in f.as_slice().iter().zip(f2.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn positive_round_trip(x in 1e-6f64..1e6) {
            let back = positive_constrain(positive_unconstrain(x).unwrap());
            prop_assert!((back - x).abs() <= 1e-12 * x);
        }
    }
}
