use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DmftError, Result};
use crate::grid::TimeGrid;
use crate::linalg::least_squares;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub rate: f64,
    pub log_prefactor: f64,
}

/// Least-squares fit of `log L(t) = log C - R t` over `times` in `[start, end]`.
pub fn fit_training_rate(times: &[f64], losses: &[f64], window: (f64, f64)) -> Result<RateFit> {
    if times.len() != losses.len() {
        return Err(DmftError::Dimension("times and losses differ in length".into()));
    }
    let picked: Vec<(f64, f64)> = times
        .iter()
        .zip(losses)
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .map(|(t, l)| (*t, *l))
        .collect();
    if picked.len() < 2 {
        return Err(DmftError::Fit(format!(
            "window [{}, {}] holds {} points",
            window.0,
            window.1,
            picked.len()
        )));
    }
    if let Some((t, l)) = picked.iter().find(|(_, l)| *l <= 0.0 || !l.is_finite()) {
        return Err(DmftError::Fit(format!("non-positive loss {l} at t={t}")));
    }
    let x = DMatrix::from_fn(picked.len(), 2, |i, j| if j == 0 { 1.0 } else { picked[i].0 });
    let y = DVector::from_iterator(picked.len(), picked.iter().map(|(_, l)| l.ln()));
    let beta = least_squares(&x, &y).ok_or_else(|| DmftError::Fit("degenerate window".into()))?;
    Ok(RateFit {
        rate: -beta[1],
        log_prefactor: beta[0],
    })
}

/// Commuting-kernel rate matrix `R(t) = Σ_{s<t} K(s) · step`.
pub fn commuting_rate_matrix(ntk: &[DMatrix<f64>], grid: &TimeGrid) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(ntk.len());
    if ntk.is_empty() {
        return out;
    }
    let mut acc = DMatrix::zeros(ntk[0].nrows(), ntk[0].ncols());
    for k in ntk {
        out.push(acc.clone());
        acc += k * grid.step_size();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_exponential() {
        let t: Vec<f64> = (0..100).map(|i| i as f64 * 0.05).collect();
        let l: Vec<f64> = t.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        let fit = fit_training_rate(&t, &l, (0.0, 10.0)).unwrap();
        assert!((fit.rate - 0.7).abs() < 1e-10);
        assert!((fit.log_prefactor - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn constant_loss_has_zero_rate() {
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let fit = fit_training_rate(&t, &[2.0; 10], (0.0, 9.0)).unwrap();
        assert!(fit.rate.abs() < 1e-12);
    }

    #[test]
    fn nonpositive_loss_errors() {
        let t = [0.0, 1.0, 2.0];
        assert!(fit_training_rate(&t, &[1.0, 0.0, 1.0], (0.0, 2.0)).is_err());
        assert!(fit_training_rate(&t, &[1.0, 0.5, 0.2], (5.0, 6.0)).is_err());
    }

    #[test]
    fn rate_matrix_accumulates() {
        let grid = TimeGrid::gradient_flow(0.5, 3).unwrap();
        let k = vec![DMatrix::identity(2, 2); 3];
        let r = commuting_rate_matrix(&k, &grid);
        assert_eq!(r[0], DMatrix::zeros(2, 2));
        assert_eq!(r[2], DMatrix::identity(2, 2));
    }
}
