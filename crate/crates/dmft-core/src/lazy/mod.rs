//! Small-γ fluctuations: static-kernel spectrum, fourth cumulants and the lazy variance equation.

mod kappa;
mod spectrum;
mod variance;

pub use kappa::{
    estimate_kappa4, kappa4_linear, mean_kernel, single_site_kernels, symmetrize_tensor, Kappa4, KappaSource,
    MIN_ENSEMBLE, MIN_SINGLE_SITE,
};
pub use spectrum::{eig_static_ntk, static_ntk, LazySpectrum, SYMMETRY_TOL};
pub use variance::{
    exp_convolution, linearized_mc_check, mean_correction_lazy, mode_convolutions, solve_variance_ode,
    EmpiricalLazyVariance, LazyVariance, DEGENERATE_GAP,
};

use crate::error::{DmftError, Result};
use crate::finite_net::{fit_training_rate, RateFit};
use crate::grid::TimeGrid;

/// Rate predicted by the static spectrum: the log-linear fit of `Σ_μ Δ_μ^∞(t)²` over `window`.
///
/// On a single mode this is exactly `2λ`; with several modes it is a
/// `y_k² e^{-2λ_k t}`-weighted average of `2λ_k` across the window.
pub fn spectral_rate(spectrum: &LazySpectrum, grid: &TimeGrid, window: (f64, f64)) -> Result<RateFit> {
    let times = grid.times();
    let loss: Vec<f64> = times.iter().map(|&t| spectrum.squared_error(t)).collect();
    if loss.iter().all(|l| *l == 0.0) {
        return Err(DmftError::Fit("zero target has no decay rate".into()));
    }
    fit_training_rate(&times, &loss, window)
}
