use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spectrum::LazySpectrum;
use crate::activation::Activation;
use crate::error::{DmftError, Result};
use crate::linalg::cholesky_with_jitter;
use crate::rng;

/// Minimum networks for the ensemble estimator.
pub const MIN_ENSEMBLE: usize = 100;
/// Minimum draws for the single-site estimator.
pub const MIN_SINGLE_SITE: usize = 10_000;

/// Fourth-cumulant tensor `κ_{kℓmn}`, the operator-basis projection of `N Cov(K_{x1x2}, K_{x3x4})`.
///
/// Stored densely as a `P² x P²` matrix with row `k·P + ℓ` and column `m·P + n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Kappa4 {
    pub num_points: usize,
    pub tensor: DMatrix<f64>,
    /// Point-space covariance `N Cov(K_μν, K_αβ)` the tensor was projected from.
    pub point_covariance: DMatrix<f64>,
}

impl Kappa4 {
    pub fn get(&self, k: usize, l: usize, m: usize, n: usize) -> f64 {
        let p = self.num_points;
        self.tensor[(k * p + l, m * p + n)]
    }

    /// Projects a point-space covariance onto the eigenbasis and symmetrizes.
    pub fn from_point_covariance(cov: DMatrix<f64>, spectrum: &LazySpectrum) -> Result<Self> {
        let p = spectrum.num_points();
        if cov.nrows() != p * p || cov.ncols() != p * p {
            return Err(DmftError::Dimension(format!("covariance is not {0}x{0}", p * p)));
        }
        let v = spectrum.unit_vectors();
        let kron = DMatrix::from_fn(p * p, p * p, |r, c| v[(r / p, c / p)] * v[(r % p, c % p)]);
        let raw = kron.transpose() * &cov * &kron / (p * p) as f64;
        Ok(Self {
            num_points: p,
            tensor: symmetrize_tensor(&raw, p),
            point_covariance: cov,
        })
    }

    /// Restriction to unordered pairs `k ≤ ℓ`, the covariance of the independent entries of `ε^K`.
    pub fn pair_covariance(&self) -> (Vec<(usize, usize)>, DMatrix<f64>) {
        let p = self.num_points;
        let pairs: Vec<(usize, usize)> = (0..p).flat_map(|k| (k..p).map(move |l| (k, l))).collect();
        let cov = DMatrix::from_fn(pairs.len(), pairs.len(), |i, j| {
            self.get(pairs[i].0, pairs[i].1, pairs[j].0, pairs[j].1)
        });
        (pairs, cov)
    }
}

/// Averages over `k↔ℓ`, `m↔n` and `(kℓ)↔(mn)`.
///
/// Every orbit is summed in a fixed order so equivalent entries are bitwise equal.
pub fn symmetrize_tensor(raw: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p * p, p * p, |r, c| {
        let (k, l, m, n) = (r / p, r % p, c / p, c % p);
        let (a, b) = ((k.min(l), k.max(l)), (m.min(n), m.max(n)));
        let ((k, l), (m, n)) = (a.min(b), a.max(b));
        let at = |a: usize, b: usize, c: usize, d: usize| raw[(a * p + b, c * p + d)];
        (at(k, l, m, n) + at(l, k, m, n) + at(k, l, n, m) + at(l, k, n, m)
            + at(m, n, k, l) + at(n, m, k, l) + at(m, n, l, k) + at(n, m, l, k))
            / 8.0
    })
}

/// Where the kernel fluctuations are measured.
#[derive(Debug, Clone)]
pub enum KappaSource<'a> {
    /// Initial NTKs of `E` networks of width `N`.
    Ensemble { kernels: &'a [DMatrix<f64>], width: usize },
    /// Per-neuron kernels `w²φ'(h)φ'(h')ρ + φ(h)φ(h')` with `h ~ N(0, ρ)`, `w ~ N(0, 1)`.
    SingleSite {
        activation: Activation,
        gram: &'a DMatrix<f64>,
        samples: usize,
        seed: u64,
    },
}

/// Sample covariance of flattened `P x P` matrices, scaled by `scale`.
fn flattened_covariance(rows: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let s = rows.nrows();
    let mean = rows.row_mean();
    let mut centred = rows.clone();
    for mut r in centred.row_iter_mut() {
        r -= &mean;
    }
    centred.transpose() * &centred * (scale / (s as f64 - 1.0))
}

/// Single-site per-neuron kernel samples, one flattened `P x P` matrix per row.
pub fn single_site_kernels(activation: Activation, gram: &DMatrix<f64>, samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    let p = gram.nrows();
    let (chol, _) = cholesky_with_jitter(gram)?;
    const CHUNK: usize = 1024;
    let mut rows = DMatrix::zeros(samples, p * p);
    let chunks: Vec<DMatrix<f64>> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, c as u64);
            let len = CHUNK.min(samples - c * CHUNK);
            let mut out = DMatrix::zeros(len, p * p);
            for i in 0..len {
                let eps = nalgebra::DVector::from_fn(p, |_, _| r.sample::<f64, _>(StandardNormal));
                let h = &chol * eps;
                let w: f64 = r.sample(StandardNormal);
                for mu in 0..p {
                    for nu in 0..p {
                        out[(i, mu * p + nu)] = w * w * activation.dphi(h[mu]) * activation.dphi(h[nu]) * gram[(mu, nu)]
                            + activation.phi(h[mu]) * activation.phi(h[nu]);
                    }
                }
            }
            out
        })
        .collect();
    for (c, block) in chunks.into_iter().enumerate() {
        rows.rows_mut(c * CHUNK, block.nrows()).copy_from(&block);
    }
    Ok(rows)
}

/// Mean of flattened kernel rows as a `P x P` matrix.
pub fn mean_kernel(rows: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let m = rows.row_mean();
    DMatrix::from_fn(p, p, |i, j| m[i * p + j])
}

/// Estimates `κ` from either source, refusing undersized samples.
pub fn estimate_kappa4(source: KappaSource<'_>, spectrum: &LazySpectrum) -> Result<Kappa4> {
    let p = spectrum.num_points();
    let cov = match source {
        KappaSource::Ensemble { kernels, width } => {
            if kernels.len() < MIN_ENSEMBLE {
                return Err(DmftError::InsufficientSamples {
                    got: kernels.len(),
                    needed: MIN_ENSEMBLE,
                    context: "ensemble kernel fluctuations",
                });
            }
            if kernels.iter().any(|k| k.nrows() != p || k.ncols() != p) {
                return Err(DmftError::Dimension("ensemble kernel has wrong size".into()));
            }
            let rows = DMatrix::from_fn(kernels.len(), p * p, |e, c| kernels[e][(c / p, c % p)]);
            flattened_covariance(&rows, width as f64)
        }
        KappaSource::SingleSite {
            activation,
            gram,
            samples,
            seed,
        } => {
            if samples < MIN_SINGLE_SITE {
                return Err(DmftError::InsufficientSamples {
                    got: samples,
                    needed: MIN_SINGLE_SITE,
                    context: "single-site kernel fluctuations",
                });
            }
            if gram.nrows() != p {
                return Err(DmftError::Dimension("gram does not match spectrum".into()));
            }
            flattened_covariance(&single_site_kernels(activation, gram, samples, seed)?, 1.0)
        }
    };
    Kappa4::from_point_covariance(cov, spectrum)
}

/// Exact `κ` for a linear two-layer net by Wick's theorem:
/// `Cov(k_μν, k_αβ) = 2ρ_μνρ_αβ + ρ_μαρ_νβ + ρ_μβρ_να`.
pub fn kappa4_linear(gram: &DMatrix<f64>, spectrum: &LazySpectrum) -> Result<Kappa4> {
    let p = gram.nrows();
    let cov = DMatrix::from_fn(p * p, p * p, |r, c| {
        let (mu, nu, a, b) = (r / p, r % p, c / p, c % p);
        2.0 * gram[(mu, nu)] * gram[(a, b)] + gram[(mu, a)] * gram[(nu, b)] + gram[(mu, b)] * gram[(nu, a)]
    });
    Kappa4::from_point_covariance(cov, spectrum)
}
