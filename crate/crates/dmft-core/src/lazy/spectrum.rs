use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::activation::{relu_gaussian_moments, Activation};
use crate::error::{DmftError, Result};

/// Absolute asymmetry tolerated in the static kernel.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigendecomposition of a static NTK as an operator on the uniform measure over the training points.
///
/// `λ_k ψ_k(x_μ) = (1/P) Σ_ν K(x_μ, x_ν) ψ_k(x_ν)` with `(1/P) Σ_μ ψ_k ψ_ℓ = δ_kℓ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LazySpectrum {
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// `P x P`; column `k` holds `ψ_k` over the points.
    pub eigenfunctions: DMatrix<f64>,
    /// `y_k = (1/P) Σ_μ ψ_k(x_μ) y_μ`.
    pub target_coords: Vec<f64>,
}

impl LazySpectrum {
    pub fn num_points(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Unit-norm eigenvectors `v_k = ψ_k / √P`.
    pub fn unit_vectors(&self) -> DMatrix<f64> {
        &self.eigenfunctions / (self.num_points() as f64).sqrt()
    }

    /// `Δ_k^∞(t) = e^{-λ_k t} y_k`.
    pub fn mode_error(&self, k: usize, t: f64) -> f64 {
        (-self.eigenvalues[k] * t).exp() * self.target_coords[k]
    }

    /// Infinite-width `Σ_μ Δ_μ(t)² = P Σ_k y_k² e^{-2λ_k t}`.
    pub fn squared_error(&self, t: f64) -> f64 {
        let p = self.num_points() as f64;
        p * (0..self.num_points()).map(|k| self.mode_error(k, t).powi(2)).sum::<f64>()
    }

    /// Operator-basis projection `(1/P²) Σ ψ_k(μ) M_μν ψ_ℓ(ν)` of a point-space matrix.
    pub fn project(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let v = self.unit_vectors();
        v.transpose() * m * v / self.num_points() as f64
    }
}

/// Symmetric eigendecomposition of `K/P`, sorted by descending eigenvalue.
///
/// Each eigenvector is signed so that its first coordinate above `1e-12` in magnitude is positive.
pub fn eig_static_ntk(k_inf: &DMatrix<f64>, targets: &[f64]) -> Result<LazySpectrum> {
    let p = k_inf.nrows();
    if !k_inf.is_square() || p != targets.len() || p == 0 {
        return Err(DmftError::Dimension(format!(
            "kernel {}x{} with {} targets",
            k_inf.nrows(),
            k_inf.ncols(),
            targets.len()
        )));
    }
    let asym = (k_inf - k_inf.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(DmftError::Config(format!("static kernel asymmetric by {asym:e}")));
    }
    let pf = p as f64;
    let eig = SymmetricEigen::new((k_inf + k_inf.transpose()) * (0.5 / pf));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut eigenvalues = Vec::with_capacity(p);
    let mut psi = DMatrix::zeros(p, p);
    for (k, &i) in order.iter().enumerate() {
        let lam = eig.eigenvalues[i];
        if lam < -1e-8 * scale {
            return Err(DmftError::NotPsd {
                jitter: 0.0,
                min_eigenvalue: lam,
            });
        }
        eigenvalues.push(lam.max(0.0));
        let mut v = eig.eigenvectors.column(i).into_owned();
        if v.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0) {
            v = -v;
        }
        psi.set_column(k, &(v * pf.sqrt()));
    }
    let target_coords = (0..p)
        .map(|k| psi.column(k).iter().zip(targets).map(|(a, b)| a * b).sum::<f64>() / pf)
        .collect();
    Ok(LazySpectrum {
        eigenvalues,
        eigenfunctions: psi,
        target_coords,
    })
}

/// Infinite-width two-layer NTK at initialization, `G ∘ ρ + Φ` with `ρ` the input gram.
///
/// Closed forms exist for linear (`2ρ`) and relu (arc-cosine) activations.
pub fn static_ntk(activation: Activation, gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = gram.nrows();
    match activation {
        Activation::Linear => Ok(gram * 2.0),
        Activation::Relu => Ok(DMatrix::from_fn(p, p, |i, j| {
            let (k1, k0) = relu_gaussian_moments(gram[(i, i)], gram[(j, j)], gram[(i, j)]);
            k0 * gram[(i, j)] + k1
        })),
        Activation::Tanh => Err(DmftError::Config(
            "no closed-form static kernel for tanh; estimate it from single-site samples".into(),
        )),
    }
}
