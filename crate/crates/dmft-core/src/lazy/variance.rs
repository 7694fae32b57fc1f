use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::kappa::Kappa4;
use super::spectrum::LazySpectrum;
use crate::error::{DmftError, Result};
use crate::grid::TimeGrid;
use crate::linalg::cholesky_with_jitter;
use crate::rng;

/// Relative gap below which two eigenvalues are treated as equal.
pub const DEGENERATE_GAP: f64 = 1e-8;

/// `∫₀ᵗ e^{-a(t-s)} e^{-b s} ds`, with the `t e^{-a t}` limit for `|a - b| < tol`.
pub fn exp_convolution(a: f64, b: f64, t: f64, tol: f64) -> f64 {
    let gap = a - b;
    if gap.abs() < tol {
        return t * (-a * t).exp();
    }
    // e^{-bt}(1 - e^{-(a-b)t})/(a-b) avoids cancellation for small gaps
    let x = gap * t;
    if x == 0.0 {
        return t * (-b * t).exp();
    }
    (-b * t).exp() * t * (-(-x).exp_m1() / x)
}

/// Solution of the lazy variance equation, evaluated from factored mode convolutions.
///
/// `Σ_kℓ(t,s) = Σ_mn κ_{kmℓn} w_km(t) w_ℓn(s)` with `w_km(t) = ∫₀ᵗ e^{-λ_k(t-t')} Δ_m^∞(t') dt'`.
#[derive(Debug, Clone)]
pub struct LazyVariance {
    pub grid: TimeGrid,
    pub num_points: usize,
    /// Per time, `P x P` matrix of `w_km(t)`.
    pub convolutions: Vec<DMatrix<f64>>,
    kappa: DMatrix<f64>,
}

impl LazyVariance {
    /// `Σ_kℓ(t_i, t_j)`.
    pub fn entry(&self, k: usize, l: usize, i: usize, j: usize) -> f64 {
        let p = self.num_points;
        let (wt, ws) = (&self.convolutions[i], &self.convolutions[j]);
        let mut acc = 0.0;
        for m in 0..p {
            for n in 0..p {
                acc += self.kappa[(k * p + m, l * p + n)] * wt[(k, m)] * ws[(l, n)];
            }
        }
        acc
    }

    /// `Σ_kℓ(t_i, t_i)` for all modes.
    pub fn equal_time(&self, i: usize) -> DMatrix<f64> {
        let p = self.num_points;
        DMatrix::from_fn(p, p, |k, l| self.entry(k, l, i, i))
    }

    /// `N Σ_μ Var Δ_μ(t) = P Σ_k Σ_kk(t,t)`.
    pub fn total_train_variance(&self) -> Vec<f64> {
        let p = self.num_points;
        (0..self.grid.num_steps())
            .map(|i| p as f64 * (0..p).map(|k| self.entry(k, k, i, i)).sum::<f64>())
            .collect()
    }

    /// `N Var Δ_μ(t)` at each training point, mapped back from the modes.
    pub fn point_variance(&self, spectrum: &LazySpectrum) -> DMatrix<f64> {
        let p = self.num_points;
        let psi = &spectrum.eigenfunctions;
        let mut out = DMatrix::zeros(p, self.grid.num_steps());
        for i in 0..self.grid.num_steps() {
            let s = psi * self.equal_time(i) * psi.transpose();
            for mu in 0..p {
                out[(mu, i)] = s[(mu, mu)];
            }
        }
        out
    }
}

fn gap_tol(spectrum: &LazySpectrum) -> f64 {
    DEGENERATE_GAP * spectrum.eigenvalues.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE)
}

/// `w_km(t) = y_m ∫₀ᵗ e^{-λ_k(t-t')} e^{-λ_m t'} dt'` for every mode pair.
pub fn mode_convolutions(spectrum: &LazySpectrum, t: f64) -> DMatrix<f64> {
    let p = spectrum.num_points();
    let tol = gap_tol(spectrum);
    let lam = &spectrum.eigenvalues;
    DMatrix::from_fn(p, p, |k, m| spectrum.target_coords[m] * exp_convolution(lam[k], lam[m], t, tol))
}

/// Integrates `(∂_t + λ_k)(∂_s + λ_ℓ) Σ_kℓ = Σ_mn κ_{kmℓn} Δ_m^∞(t) Δ_n^∞(s)` from zero initial data.
pub fn solve_variance_ode(kappa: &Kappa4, spectrum: &LazySpectrum, grid: &TimeGrid) -> Result<LazyVariance> {
    if kappa.num_points != spectrum.num_points() {
        return Err(DmftError::Dimension("kappa and spectrum disagree on P".into()));
    }
    let convolutions = grid.times().iter().map(|&t| mode_convolutions(spectrum, t)).collect();
    Ok(LazyVariance {
        grid: *grid,
        num_points: spectrum.num_points(),
        convolutions,
        kappa: kappa.tensor.clone(),
    })
}

/// Empirical mode covariances from the brute-force linearized dynamics.
#[derive(Debug, Clone)]
pub struct EmpiricalLazyVariance {
    /// Per time, `P x P` sample second moment of `ε_k(t)` (already `N`-scaled).
    pub equal_time: Vec<DMatrix<f64>>,
    /// `P Σ_k ⟨ε_k²⟩` and its standard error.
    pub total: Vec<f64>,
    pub total_std_error: Vec<f64>,
}

/// Samples `ε^K` with covariance `κ` (the `1/N` is factored out) and integrates
/// `dε_k/dt = -λ_k ε_k - Σ_m ε^K_km Δ_m^∞(t)` by RK4 on `substeps` per grid step.
pub fn linearized_mc_check(
    kappa: &Kappa4,
    spectrum: &LazySpectrum,
    grid: &TimeGrid,
    draws: usize,
    substeps: usize,
    seed: u64,
) -> Result<EmpiricalLazyVariance> {
    let p = spectrum.num_points();
    if draws < 2 || substeps == 0 {
        return Err(DmftError::Config("need at least two draws and one substep".into()));
    }
    let (pairs, cov) = kappa.pair_covariance();
    let chol = if cov.amax() == 0.0 {
        DMatrix::zeros(pairs.len(), pairs.len())
    } else {
        cholesky_with_jitter(&cov)?.0
    };
    let t_len = grid.num_steps();
    let h = grid.step_size() / substeps as f64;
    let lam = DVector::from_vec(spectrum.eigenvalues.clone());
    let drive = |t: f64| DVector::from_fn(p, |m, _| spectrum.mode_error(m, t));

    struct Acc {
        second: Vec<DMatrix<f64>>,
        total: Vec<f64>,
        total_sq: Vec<f64>,
    }
    let zero = || Acc {
        second: vec![DMatrix::zeros(p, p); t_len],
        total: vec![0.0; t_len],
        total_sq: vec![0.0; t_len],
    };
    let acc = (0..draws)
        .into_par_iter()
        .fold(zero, |mut acc, d| {
            let mut r = rng::stream(seed, d as u64);
            let z = DVector::from_fn(pairs.len(), |_, _| r.sample::<f64, _>(StandardNormal));
            let x = &chol * z;
            let mut ek = DMatrix::zeros(p, p);
            for (i, &(k, l)) in pairs.iter().enumerate() {
                ek[(k, l)] = x[i];
                ek[(l, k)] = x[i];
            }
            let rhs = |t: f64, e: &DVector<f64>| -lam.component_mul(e) - &ek * drive(t);
            let mut eps = DVector::zeros(p);
            for j in 0..t_len {
                acc.second[j] += &eps * eps.transpose();
                let tot = p as f64 * eps.norm_squared();
                acc.total[j] += tot;
                acc.total_sq[j] += tot * tot;
                if j + 1 == t_len {
                    break;
                }
                for sub in 0..substeps {
                    let t = grid.time(j) + sub as f64 * h;
                    let k1 = rhs(t, &eps);
                    let k2 = rhs(t + h / 2.0, &(&eps + &k1 * (h / 2.0)));
                    let k3 = rhs(t + h / 2.0, &(&eps + &k2 * (h / 2.0)));
                    let k4 = rhs(t + h, &(&eps + &k3 * h));
                    eps += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                }
            }
            acc
        })
        .reduce(zero, |mut a, b| {
            for j in 0..t_len {
                a.second[j] += &b.second[j];
                a.total[j] += b.total[j];
                a.total_sq[j] += b.total_sq[j];
            }
            a
        });
    let n = draws as f64;
    let total: Vec<f64> = acc.total.iter().map(|s| s / n).collect();
    let total_std_error = acc
        .total_sq
        .iter()
        .zip(&total)
        .map(|(sq, m)| ((sq / n - m * m).max(0.0) / (n - 1.0)).sqrt())
        .collect();
    Ok(EmpiricalLazyVariance {
        equal_time: acc.second.into_iter().map(|m| m / n).collect(),
        total,
        total_std_error,
    })
}

/// Integrates `(d/dt + λ_k) Δ¹_k = -Σ_ℓ K¹_kℓ Δ_ℓ^∞(t) + Σ_ℓℓ' κ_{kℓℓℓ'} w_ℓℓ'(t)`, `Δ¹(0) = 0`.
///
/// `k1` is the point-space mean-kernel shift `N(⟨K⟩ - K^∞)`; the exponential
/// trapezoid rule is applied on `substeps` per grid step.
pub fn mean_correction_lazy(
    k1: &DMatrix<f64>,
    kappa: &Kappa4,
    spectrum: &LazySpectrum,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<DMatrix<f64>> {
    let p = spectrum.num_points();
    if k1.nrows() != p || k1.ncols() != p || kappa.num_points != p || substeps == 0 {
        return Err(DmftError::Dimension("mean correction inputs disagree on P".into()));
    }
    let k1_modes = spectrum.project(k1);
    let source = |t: f64| -> DVector<f64> {
        let w = mode_convolutions(spectrum, t);
        DVector::from_fn(p, |k, _| {
            let mut s = 0.0;
            for l in 0..p {
                s -= k1_modes[(k, l)] * spectrum.mode_error(l, t);
                for l2 in 0..p {
                    s += kappa.get(k, l, l, l2) * w[(l, l2)];
                }
            }
            s
        })
    };
    let t_len = grid.num_steps();
    let h = grid.step_size() / substeps as f64;
    let mut out = DMatrix::zeros(p, t_len);
    let mut state = DVector::zeros(p);
    let mut src = source(0.0);
    for j in 1..t_len {
        for sub in 1..=substeps {
            let t = grid.time(j - 1) + sub as f64 * h;
            let next = source(t);
            for k in 0..p {
                let decay = (-spectrum.eigenvalues[k] * h).exp();
                state[k] = decay * (state[k] + 0.5 * h * src[k]) + 0.5 * h * next[k];
            }
            src = next;
        }
        out.set_column(j, &state);
    }
    Ok(out)
}
