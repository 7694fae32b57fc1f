use serde::{Deserialize, Serialize};

use super::sectors::{sector_moments, SectorMoments};
use super::signal::{solve_signal, SignalScheme, SignalSolution};
use crate::error::{DmftError, Result};
use crate::grid::TimeGrid;

/// Ratio `P/N` above which the leading-order expansion is flagged as unreliable.
pub const VALIDITY_RATIO: f64 = 0.25;

/// `⟨|Δ(t)|²⟩ ≈ Δ_y² + 2Δ¹_yΔ_y/N + Σ_Δy/N + (P-1)Σ_⊥/N`, term by term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossExpansion {
    pub num_points: usize,
    pub width: usize,
    pub infinite: Vec<f64>,
    pub mean_term: Vec<f64>,
    pub signal_term: Vec<f64>,
    pub orthogonal_term: Vec<f64>,
    pub total: Vec<f64>,
    /// Set when `P/N > 0.25`.
    pub outside_validity: bool,
}

impl LossExpansion {
    /// Share of the orthogonal term in the variance sum at step `t`.
    pub fn orthogonal_share(&self, t: usize) -> f64 {
        let v = self.signal_term[t] + self.orthogonal_term[t];
        if v == 0.0 {
            0.0
        } else {
            self.orthogonal_term[t] / v
        }
    }
}

/// Combines the four terms. `mean_shift` is `Δ¹_y`; pass `None` to drop the mean term.
pub fn expected_loss(
    signal_errors: &[f64],
    mean_shift: Option<&[f64]>,
    signal_variance: &[f64],
    orthogonal_variance: &[f64],
    num_points: usize,
    width: usize,
) -> Result<LossExpansion> {
    let t_len = signal_errors.len();
    if signal_variance.len() != t_len
        || orthogonal_variance.len() != t_len
        || mean_shift.is_some_and(|m| m.len() != t_len)
    {
        return Err(DmftError::Dimension("loss expansion terms are on different grids".into()));
    }
    if num_points == 0 || width == 0 {
        return Err(DmftError::Config("P and N must be positive".into()));
    }
    let n = width as f64;
    let extra = (num_points - 1) as f64;
    let infinite: Vec<f64> = signal_errors.iter().map(|d| d * d).collect();
    let mean_term: Vec<f64> = match mean_shift {
        Some(m) => m.iter().zip(signal_errors).map(|(m, d)| 2.0 * m * d / n).collect(),
        None => vec![0.0; t_len],
    };
    let signal_term: Vec<f64> = signal_variance.iter().map(|v| v / n).collect();
    let orthogonal_term: Vec<f64> = orthogonal_variance.iter().map(|v| extra * v / n).collect();
    let total = (0..t_len)
        .map(|t| infinite[t] + mean_term[t] + signal_term[t] + orthogonal_term[t])
        .collect();
    Ok(LossExpansion {
        num_points,
        width,
        infinite,
        mean_term,
        signal_term,
        orthogonal_term,
        total,
        outside_validity: num_points as f64 / n > VALIDITY_RATIO,
    })
}

/// Signal solution and sector statistics for one `(γ, |y|)` on one grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhitenedTheory {
    pub signal: SignalSolution,
    pub sectors: SectorMoments,
}

impl WhitenedTheory {
    pub fn new(gamma: f64, target: f64, grid: &TimeGrid) -> Result<Self> {
        let signal = solve_signal(gamma, target, grid, SignalScheme::Discrete)?;
        let sectors = sector_moments(&signal)?;
        Ok(Self { signal, sectors })
    }

    /// Offline loss expansion for `P` whitened points at width `N`, including the mean shift.
    pub fn expected_loss(&self, num_points: usize, width: usize) -> Result<LossExpansion> {
        let shift = self.sectors.mean_shift(num_points);
        expected_loss(
            &self.signal.errors(),
            Some(&shift),
            &self.sectors.signal_variance,
            &self.sectors.orthogonal_variance,
            num_points,
            width,
        )
    }
}

/// Online test loss `⟨|β - β⋆|²⟩` in `D_in` dimensions: the offline expansion with `Δ_y ↦ β⋆ - β`, `P ↦ D_in`.
pub fn online_map(theory: &WhitenedTheory, input_dim: usize, width: usize) -> Result<LossExpansion> {
    theory.expected_loss(input_dim, width)
}
