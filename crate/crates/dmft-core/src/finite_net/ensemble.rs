use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{init_network, Dataset, NetworkConfig};
use super::train::{train, TrainOptions, TrainingTrajectory};
use crate::error::{DmftError, Result};
use crate::grid::TimeGrid;

/// Per-time ensemble statistics of a scalar observable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    /// Unbiased sample variance.
    pub variance: Vec<f64>,
    /// Standard error of the mean.
    pub std_error: Vec<f64>,
    /// Standard error of the variance estimate.
    pub variance_std_error: Vec<f64>,
    /// `N · Var`, the width-independent fluctuation scale.
    pub scaled_variance: Vec<f64>,
}

/// `samples[member][t]`.
pub fn series_stats(samples: &[Vec<f64>], width: usize) -> Result<SeriesStats> {
    let m = samples.len();
    if m < 2 {
        return Err(DmftError::InsufficientSamples {
            got: m,
            needed: 2,
            context: "ensemble variance",
        });
    }
    let t_len = samples[0].len();
    if samples.iter().any(|s| s.len() != t_len) {
        return Err(DmftError::Dimension("ragged ensemble samples".into()));
    }
    let mf = m as f64;
    let mut out = SeriesStats {
        mean: vec![0.0; t_len],
        variance: vec![0.0; t_len],
        std_error: vec![0.0; t_len],
        variance_std_error: vec![0.0; t_len],
        scaled_variance: vec![0.0; t_len],
    };
    for t in 0..t_len {
        let mean = samples.iter().map(|s| s[t]).sum::<f64>() / mf;
        let sq: Vec<f64> = samples.iter().map(|s| (s[t] - mean).powi(2)).collect();
        let var = sq.iter().sum::<f64>() / (mf - 1.0);
        let sq_mean = sq.iter().sum::<f64>() / mf;
        let sq_var = sq.iter().map(|v| (v - sq_mean).powi(2)).sum::<f64>() / (mf - 1.0);
        out.mean[t] = mean;
        out.variance[t] = var;
        out.std_error[t] = (var / mf).sqrt();
        out.variance_std_error[t] = (sq_var / mf).sqrt() * mf / (mf - 1.0);
        out.scaled_variance[t] = width as f64 * var;
    }
    Ok(out)
}

/// Sample cross-covariance `Cov(a_i, b_j)` with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub covariance: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
}

pub fn cross_covariance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<CovarianceEstimate> {
    let m = a.len();
    if m < 2 || b.len() != m {
        return Err(DmftError::InsufficientSamples {
            got: m.min(b.len()),
            needed: 2,
            context: "cross covariance",
        });
    }
    let mf = m as f64;
    let (ra, rb) = (a[0].len(), b[0].len());
    let mean = |x: &[Vec<f64>], len: usize| -> Vec<f64> {
        (0..len).map(|i| x.iter().map(|s| s[i]).sum::<f64>() / mf).collect()
    };
    let (ma, mb) = (mean(a, ra), mean(b, rb));
    let mut sum: DMatrix<f64> = DMatrix::zeros(ra, rb);
    let mut sum_sq: DMatrix<f64> = DMatrix::zeros(ra, rb);
    for (sa, sb) in a.iter().zip(b) {
        for i in 0..ra {
            let da = sa[i] - ma[i];
            for j in 0..rb {
                let p = da * (sb[j] - mb[j]);
                sum[(i, j)] += p;
                sum_sq[(i, j)] += p * p;
            }
        }
    }
    let covariance = &sum / (mf - 1.0);
    let std_error = DMatrix::from_fn(ra, rb, |i, j| {
        let mu = sum[(i, j)] / mf;
        let var = (sum_sq[(i, j)] / mf - mu * mu).max(0.0) * mf / (mf - 1.0);
        (var / mf).sqrt()
    });
    Ok(CovarianceEstimate {
        covariance,
        std_error,
    })
}

/// `E` trajectories sharing config, data and grid, differing only in the init stream.
#[derive(Debug, Clone)]
pub struct EnsembleRecord {
    pub config: NetworkConfig,
    pub members: Vec<TrainingTrajectory>,
}

impl EnsembleRecord {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn collect<F>(&self, observable: F) -> Vec<Vec<f64>>
    where
        F: Fn(&TrainingTrajectory) -> Vec<f64>,
    {
        self.members.iter().map(observable).collect()
    }

    pub fn stats<F>(&self, observable: F) -> Result<SeriesStats>
    where
        F: Fn(&TrainingTrajectory) -> Vec<f64>,
    {
        series_stats(&self.collect(observable), self.config.width)
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w: Vec<String> = self.members.iter().flat_map(|m| m.warnings.clone()).collect();
        w.sort();
        w.dedup();
        w
    }
}

/// Trains `size` members in parallel; member `k` uses stream `(config.seed, k)`.
pub fn run_ensemble(
    config: &NetworkConfig,
    dataset: &Dataset,
    grid: &TimeGrid,
    options: &TrainOptions,
    size: usize,
) -> Result<EnsembleRecord> {
    if size < 2 {
        return Err(DmftError::InsufficientSamples {
            got: size,
            needed: 2,
            context: "ensemble size",
        });
    }
    run_members(config, dataset, grid, options, &(0..size as u64).collect::<Vec<_>>())
}

/// Same as [`run_ensemble`] with an explicit list of member indices.
pub fn run_members(
    config: &NetworkConfig,
    dataset: &Dataset,
    grid: &TimeGrid,
    options: &TrainOptions,
    members: &[u64],
) -> Result<EnsembleRecord> {
    config.validate()?;
    let members = members
        .par_iter()
        .map(|&k| {
            let params = init_network(config, k)?;
            train(&params, config, dataset, grid, options).map_err(|e| DmftError::MemberDiverged {
                member: k,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleRecord {
        config: *config,
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;

    #[test]
    fn identical_samples_have_zero_variance() {
        let s = vec![vec![1.0, 2.0]; 5];
        let st = series_stats(&s, 10).unwrap();
        assert_eq!(st.variance, vec![0.0, 0.0]);
        assert_eq!(st.mean, vec![1.0, 2.0]);
    }

    #[test]
    fn single_sample_is_rejected() {
        assert!(series_stats(&[vec![1.0]], 1).is_err());
    }

    #[test]
    fn known_variance() {
        let s: Vec<Vec<f64>> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| vec![v]).collect();
        let st = series_stats(&s, 2).unwrap();
        assert!((st.variance[0] - 5.0 / 3.0).abs() < 1e-14);
        assert!((st.scaled_variance[0] - 10.0 / 3.0).abs() < 1e-14);
        let c = cross_covariance(&s, &s).unwrap();
        assert!((c.covariance[(0, 0)] - 5.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn ensemble_is_deterministic_and_diverse() {
        let cfg = NetworkConfig {
            hidden_layers: 1,
            width: 8,
            input_dim: 2,
            gamma: 1.0,
            activation: Activation::Tanh,
            seed: 3,
        };
        let ds = Dataset::single_point(2, 1.0, None).unwrap();
        let grid = TimeGrid::gradient_flow(0.1, 5).unwrap();
        let a = run_ensemble(&cfg, &ds, &grid, &TrainOptions::default(), 3).unwrap();
        let b = run_ensemble(&cfg, &ds, &grid, &TrainOptions::default(), 3).unwrap();
        for (x, y) in a.members.iter().zip(&b.members) {
            assert_eq!(x.errors, y.errors);
        }
        assert_ne!(a.members[0].errors, a.members[1].errors);
    }
}
