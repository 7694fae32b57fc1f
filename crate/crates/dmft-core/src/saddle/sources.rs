use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::linalg::cholesky_with_jitter;

/// `rows x cols` i.i.d. standard normals.
pub fn standard_normals(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // fill row by row so that the stream order does not depend on storage layout
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Rows of `eps` mapped to samples with covariance `cov` (`eps · Lᵀ`).
pub fn colour(eps: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (l, _) = cholesky_with_jitter(cov)?;
    Ok(eps * l.transpose())
}

/// `num` Gaussian trajectories (rows) with the given covariance.
pub fn sample_gp(cov: &DMatrix<f64>, num: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let eps = standard_normals(num, cov.nrows(), rng);
    colour(&eps, cov)
}

/// Broadcast a time-independent `n x n` kernel to `nT x nT` in sample-major layout.
pub fn broadcast_static(kernel: &DMatrix<f64>, num_steps: usize) -> DMatrix<f64> {
    let n = kernel.nrows();
    DMatrix::from_fn(n * num_steps, n * num_steps, |i, j| kernel[(i / num_steps, j / num_steps)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::DmftError;
    use crate::rng::stream;

    #[test]
    fn identity_covariance_is_recovered() {
        let mut rng = stream(1, 0);
        let s = sample_gp(&DMatrix::identity(3, 3), 20000, &mut rng).unwrap();
        let emp = s.tr_mul(&s) / 20000.0;
        assert!((emp - DMatrix::identity(3, 3)).amax() < 0.05);
    }

    #[test]
    fn rank_one_samples_are_proportional() {
        let v = nalgebra::DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let cov = &v * v.transpose();
        let mut rng = stream(2, 0);
        let s = sample_gp(&cov, 50, &mut rng).unwrap();
        for row in s.row_iter() {
            let c = row[0];
            for k in 0..3 {
                assert!((row[k] - c * v[k]).abs() < 1e-3 * (1.0 + c.abs()));
            }
        }
    }

    #[test]
    fn indefinite_covariance_fails() {
        let mut cov = DMatrix::identity(2, 2);
        cov[(1, 1)] = -1.0;
        let mut rng = stream(3, 0);
        let err = sample_gp(&cov, 5, &mut rng).unwrap_err();
        assert!(matches!(err, DmftError::NotPsd { min_eigenvalue, .. } if min_eigenvalue < -0.9));
    }

    #[test]
    fn broadcast_layout() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = broadcast_static(&k, 3);
        assert_eq!(b[(0, 2)], 1.0);
        assert_eq!(b[(1, 4)], 2.0);
        assert_eq!(b[(5, 0)], 3.0);
    }
}
