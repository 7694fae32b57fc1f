use serde::{Deserialize, Serialize};

use crate::error::{DmftError, Result};

/// How consecutive grid points are related.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Explicit Euler discretization of gradient flow; integrals carry `step_size`.
    GradientFlowEuler,
    /// Discrete gradient descent with learning rate `step_size`; integrals are plain sums.
    DiscreteGd,
}

/// Uniform training-time grid with `num_steps` points.
///
/// Both modes advance the dynamics by `step_size` per step; they differ only in
/// how time is labelled (see [`TimeGrid::time`]).
///
/// Causal integrals follow the left-Riemann rule with `Θ(0) = 0`: the value at
/// `t_j` only sees samples at `t_i` with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    step_size: f64,
    num_steps: usize,
    mode: StepMode,
}

impl TimeGrid {
    pub fn new(step_size: f64, num_steps: usize, mode: StepMode) -> Result<Self> {
        if !(step_size > 0.0) || !step_size.is_finite() {
            return Err(DmftError::Config(format!(
                "step_size must be positive and finite, got {step_size}"
            )));
        }
        if num_steps == 0 {
            return Err(DmftError::Config("num_steps must be at least 1".into()));
        }
        Ok(Self {
            step_size,
            num_steps,
            mode,
        })
    }

    pub fn gradient_flow(step_size: f64, num_steps: usize) -> Result<Self> {
        Self::new(step_size, num_steps, StepMode::GradientFlowEuler)
    }

    pub fn discrete(learning_rate: f64, num_steps: usize) -> Result<Self> {
        Self::new(learning_rate, num_steps, StepMode::DiscreteGd)
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn mode(&self) -> StepMode {
        self.mode
    }

    /// Elapsed training time at index `j`: `j * step_size` for flow, the step count for GD.
    pub fn time(&self, j: usize) -> f64 {
        match self.mode {
            StepMode::GradientFlowEuler => j as f64 * self.step_size,
            StepMode::DiscreteGd => j as f64,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.num_steps).map(|j| self.time(j)).collect()
    }

    /// Quadrature weight attached to one past step.
    pub fn weight(&self) -> f64 {
        match self.mode {
            StepMode::GradientFlowEuler => self.step_size,
            StepMode::DiscreteGd => 1.0,
        }
    }

    /// A grid with the same step and mode but a different length.
    pub fn with_steps(&self, num_steps: usize) -> Result<Self> {
        Self::new(self.step_size, num_steps, self.mode)
    }
}

/// Row-major, sample-major flat index `sample * T + time_index`.
pub fn flatten_index(
    sample: usize,
    time_index: usize,
    grid: &TimeGrid,
    num_samples: usize,
) -> Result<usize> {
    if sample >= num_samples {
        return Err(DmftError::Index {
            what: "sample",
            value: sample,
            limit: num_samples,
        });
    }
    if time_index >= grid.num_steps() {
        return Err(DmftError::Index {
            what: "time_index",
            value: time_index,
            limit: grid.num_steps(),
        });
    }
    Ok(sample * grid.num_steps() + time_index)
}

/// Inverse of [`flatten_index`].
pub fn unflatten_index(flat: usize, grid: &TimeGrid, num_samples: usize) -> Result<(usize, usize)> {
    let t = grid.num_steps();
    if flat >= t * num_samples {
        return Err(DmftError::Index {
            what: "flat",
            value: flat,
            limit: t * num_samples,
        });
    }
    Ok((flat / t, flat % t))
}

/// Weights `w[i]` for the causal integral at the final grid time: `∫₀^{t_{T-1}} v ≈ Σ_{i<T-1} w[i] v[i]`.
///
/// Every entry is the same constant, so the integral up to `t_j` uses the first
/// `j` weights.
pub fn quadrature_weights(grid: &TimeGrid) -> Vec<f64> {
    vec![grid.weight(); grid.num_steps().saturating_sub(1)]
}

/// Running causal integral `I[j] = Σ_{i<j} w v[i]`, so `I[0] = 0`.
pub fn causal_integral(grid: &TimeGrid, values: &[f64]) -> Vec<f64> {
    let w = grid.weight();
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for v in values {
        out.push(acc);
        acc += w * v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_examples() {
        let g = TimeGrid::gradient_flow(0.1, 10).unwrap();
        assert_eq!(flatten_index(0, 0, &g, 3).unwrap(), 0);
        assert_eq!(flatten_index(1, 0, &g, 3).unwrap(), 10);
        assert_eq!(flatten_index(2, 9, &g, 3).unwrap(), 29);
        assert!(flatten_index(3, 0, &g, 3).is_err());
        assert!(flatten_index(0, 10, &g, 3).is_err());
    }

    #[test]
    fn flatten_is_bijective_on_small_domains() {
        for p in 1..5 {
            for t in 1..7 {
                let g = TimeGrid::gradient_flow(0.5, t).unwrap();
                let mut seen = vec![false; p * t];
                for mu in 0..p {
                    for j in 0..t {
                        let k = flatten_index(mu, j, &g, p).unwrap();
                        assert!(!seen[k]);
                        seen[k] = true;
                        assert_eq!(unflatten_index(k, &g, p).unwrap(), (mu, j));
                    }
                }
                assert!(seen.iter().all(|&s| s));
            }
        }
    }

    #[test]
    fn single_step_grid_has_empty_integral() {
        let g = TimeGrid::gradient_flow(0.1, 1).unwrap();
        assert!(quadrature_weights(&g).is_empty());
        assert_eq!(causal_integral(&g, &[5.0]), vec![0.0]);
    }

    #[test]
    fn constant_integrates_to_elapsed_time() {
        let g = TimeGrid::gradient_flow(0.1, 6).unwrap();
        let i = causal_integral(&g, &[1.0; 6]);
        assert!((i[5] - 0.5).abs() <= g.step_size());
        assert_eq!(i[0], 0.0);
    }

    #[test]
    fn discrete_weights_count_steps() {
        let g = TimeGrid::discrete(0.7, 5).unwrap();
        let i = causal_integral(&g, &[1.0; 5]);
        assert_eq!(i[3], 3.0);
        assert!(quadrature_weights(&g).iter().all(|&w| w == 1.0));
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(TimeGrid::gradient_flow(0.0, 3).is_err());
        assert!(TimeGrid::gradient_flow(-1.0, 3).is_err());
        assert!(TimeGrid::gradient_flow(0.1, 0).is_err());
    }
}
