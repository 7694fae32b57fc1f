//! Dense linear-algebra helpers shared by the samplers and propagator assemblies.

use nalgebra::{DMatrix, DVector};

use crate::error::{DmftError, Result};
use crate::grid::min_eigenvalue;

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-6;
pub const CONDITION_LIMIT: f64 = 1e12;
pub const TIKHONOV: f64 = 1e-10;

/// Lower Cholesky factor with adaptive diagonal jitter.
///
/// Tries the bare matrix first, then adds `jitter * mean_diag` starting at
/// [`JITTER_START`] and growing tenfold up to [`JITTER_MAX`]. Returns the factor
/// and the relative jitter used (zero when none was needed).
pub fn cholesky_with_jitter(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if !cov.is_square() {
        return Err(DmftError::Dimension("covariance must be square".into()));
    }
    let n = cov.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok((c.l(), 0.0));
    }
    let scale = (sym.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = sym.clone();
        for i in 0..n {
            m[(i, i)] += jitter * scale;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c.l(), jitter));
        }
        jitter *= 10.0;
    }
    Err(DmftError::NotPsd {
        jitter: JITTER_MAX,
        min_eigenvalue: min_eigenvalue(&sym),
    })
}

/// 1-norm (max absolute column sum).
pub fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse of a square matrix with a 1-norm condition estimate.
///
/// When the estimate exceeds [`CONDITION_LIMIT`], the matrix is regularized by
/// `TIKHONOV * I` and a warning is pushed onto `warnings`.
pub fn inverse_conditioned(
    m: &DMatrix<f64>,
    context: &str,
    warnings: &mut Vec<String>,
) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(DmftError::Dimension(format!("{context}: matrix not square")));
    }
    let n = m.nrows();
    let inv = m.clone().lu().try_inverse();
    let cond = match &inv {
        Some(i) => norm1(m) * norm1(i),
        None => f64::INFINITY,
    };
    if cond.is_finite() && cond <= CONDITION_LIMIT {
        return Ok(inv.unwrap());
    }
    warnings.push(format!(
        "{context}: condition estimate {cond:e} exceeds {CONDITION_LIMIT:e}; applying Tikhonov {TIKHONOV:e}"
    ));
    let reg = m + DMatrix::identity(n, n) * TIKHONOV;
    let inv = reg.clone().lu().try_inverse().ok_or(DmftError::Singular {
        condition: cond,
        context: context.to_string(),
    })?;
    let cond_reg = norm1(&reg) * norm1(&inv);
    if !cond_reg.is_finite() {
        return Err(DmftError::Singular {
            condition: cond,
            context: context.to_string(),
        });
    }
    Ok(inv)
}

/// `A K Aᵀ`, symmetrized to remove round-off asymmetry.
pub fn sandwich(a: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    let s = a * k * a.transpose();
    (&s + s.transpose()) * 0.5
}

/// Ordinary least squares of `y` on columns of `x`.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    xtx.lu().solve(&xty)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_of_identity_needs_no_jitter() {
        let (l, j) = cholesky_with_jitter(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(j, 0.0);
        assert!((l - DMatrix::<f64>::identity(4, 4)).amax() < 1e-15);
    }

    #[test]
    fn rank_one_gets_jitter() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let (l, j) = cholesky_with_jitter(&(&v * v.transpose())).unwrap();
        assert!(j > 0.0 && j <= JITTER_MAX);
        let back = &l * l.transpose();
        assert!((back - &v * v.transpose()).amax() < 1e-5);
    }

    #[test]
    fn indefinite_matrix_reports_negative_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        match cholesky_with_jitter(&m) {
            Err(DmftError::NotPsd { min_eigenvalue, .. }) => {
                assert!((min_eigenvalue + 0.5).abs() < 1e-12)
            }
            other => panic!("expected NotPsd, got {other:?}"),
        }
    }

    #[test]
    fn singular_matrix_is_regularized_with_warning() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let mut w = Vec::new();
        let inv = inverse_conditioned(&m, "test", &mut w).unwrap();
        assert_eq!(w.len(), 1);
        assert!(inv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn least_squares_recovers_line() {
        let x = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(5, |i, _| 2.0 - 0.5 * i as f64);
        let b = least_squares(&x, &y).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] + 0.5).abs() < 1e-12);
    }
}
