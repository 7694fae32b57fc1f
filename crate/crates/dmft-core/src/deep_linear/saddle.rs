use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DmftError, Result};
use crate::grid::TimeGrid;

/// Largest grid the dense log-det differentiation is run on.
pub const MAX_STEPS: usize = 64;

/// Linear network of `depth` weight layers trained on one point with `|x|² = D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepLinearConfig {
    /// Number of weight layers; `depth - 1` hidden layers.
    pub depth: usize,
    pub gamma: f64,
    pub target: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Relaxation of each fixed-point update; 1 is a plain Picard sweep.
    #[serde(default = "default_damping")]
    pub damping: f64,
}

fn default_tol() -> f64 {
    1e-12
}

fn default_max_iters() -> usize {
    2000
}

fn default_damping() -> f64 {
    1.0
}

impl DeepLinearConfig {
    pub fn new(depth: usize, gamma: f64, target: f64) -> Self {
        Self {
            depth,
            gamma,
            target,
            tol: default_tol(),
            max_iters: default_max_iters(),
            damping: default_damping(),
        }
    }

    pub fn hidden_layers(&self) -> usize {
        self.depth - 1
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.depth < 2 {
            return Err(DmftError::Config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(DmftError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !self.target.is_finite() {
            return Err(DmftError::Config("target must be finite".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(DmftError::Config(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if grid.num_steps() > MAX_STEPS {
            return Err(DmftError::Config(format!("{} steps exceeds the cap of {MAX_STEPS}", grid.num_steps())));
        }
        Ok(())
    }
}

/// Second moments and responses of one layer's Gaussian fields.
#[derive(Debug, Clone)]
pub struct LayerMoments {
    /// `⟨h hᵀ⟩`.
    pub feature: DMatrix<f64>,
    /// `⟨g gᵀ⟩`.
    pub gradient: DMatrix<f64>,
    /// `⟨g hᵀ⟩`.
    pub cross: DMatrix<f64>,
    /// `∂h/∂r = M C`.
    pub forward_response: DMatrix<f64>,
    /// `∂g/∂u = D M`.
    pub backward_response: DMatrix<f64>,
}

/// Closed form of `h = u + C g`, `g = r + D h` with `u ~ GP(0, Σ_u)`, `r ~ GP(0, Σ_r)` independent:
/// `h = M(u + C r)`, `g = D M u + (I + D M C) r`, `M = (I - C D)⁻¹`.
pub fn layer_moments(
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    sigma_u: &DMatrix<f64>,
    sigma_r: &DMatrix<f64>,
) -> Result<LayerMoments> {
    let t = c.nrows();
    let m = (DMatrix::identity(t, t) - c * d)
        .try_inverse()
        .ok_or_else(|| DmftError::Singular {
            condition: f64::INFINITY,
            context: "layer field map I - CD".into(),
        })?;
    let mc = &m * c;
    let dm = d * &m;
    let g_r = DMatrix::identity(t, t) + d * &mc;
    let feature = &m * sigma_u * m.transpose() + &mc * sigma_r * mc.transpose();
    let gradient = &dm * sigma_u * dm.transpose() + &g_r * sigma_r * g_r.transpose();
    let cross = &dm * sigma_u * m.transpose() + &g_r * sigma_r * mc.transpose();
    Ok(LayerMoments {
        feature,
        gradient,
        cross,
        forward_response: mc,
        backward_response: dm,
    })
}

/// Infinite-width order parameters; layer `ℓ` (1-based) is stored at index `ℓ - 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepLinearState {
    pub config: DeepLinearConfig,
    pub grid: TimeGrid,
    /// `H^ℓ(t,s)`.
    pub feature: Vec<DMatrix<f64>>,
    /// `G^ℓ(t,s)`.
    pub gradient: Vec<DMatrix<f64>>,
    /// `R^ℓ = ∂h^ℓ/∂r^ℓ` for `ℓ < L`, entering layer `ℓ+1`.
    pub forward_response: Vec<DMatrix<f64>>,
    /// `Q^ℓ = ∂g^{ℓ+1}/∂u^{ℓ+1}` for `ℓ < L`, entering layer `ℓ`.
    pub backward_response: Vec<DMatrix<f64>>,
    /// `Δ(t)`.
    pub errors: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl DeepLinearState {
    pub fn hidden_layers(&self) -> usize {
        self.feature.len()
    }

    pub fn num_steps(&self) -> usize {
        self.grid.num_steps()
    }

    /// `Θ_Δ(t,s) = γ·step·Δ(s)` for `t > s`.
    pub fn error_coupling(&self) -> DMatrix<f64> {
        error_coupling(&self.errors, self.config.gamma, self.grid.step_size())
    }

    /// `H^{ℓ-1}` with `H⁰ = 11ᵀ`.
    pub fn feature_below(&self, layer: usize) -> DMatrix<f64> {
        if layer == 1 {
            ones(self.num_steps())
        } else {
            self.feature[layer - 2].clone()
        }
    }

    /// `G^{ℓ+1}` with `G^{L+1} = 11ᵀ`.
    pub fn gradient_above(&self, layer: usize) -> DMatrix<f64> {
        if layer == self.hidden_layers() {
            ones(self.num_steps())
        } else {
            self.gradient[layer].clone()
        }
    }

    /// `(C^ℓ, D^ℓ)` for a 1-based layer.
    pub fn couplings(&self, layer: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let theta = self.error_coupling();
        let l = self.hidden_layers();
        let mut c = theta.component_mul(&self.feature_below(layer));
        if layer > 1 {
            c += &self.forward_response[layer - 2];
        }
        let mut d = theta.component_mul(&self.gradient_above(layer));
        if layer < l {
            d += &self.backward_response[layer - 1];
        }
        (c, d)
    }

    /// `K(t) = Σ_{ℓ=0}^{L} G^{ℓ+1}(t,t) H^ℓ(t,t)`.
    pub fn ntk(&self) -> Vec<f64> {
        let l = self.hidden_layers();
        (0..self.num_steps())
            .map(|t| {
                (0..=l)
                    .map(|k| {
                        let h = if k == 0 { 1.0 } else { self.feature[k - 1][(t, t)] };
                        let g = if k == l { 1.0 } else { self.gradient[k][(t, t)] };
                        g * h
                    })
                    .sum()
            })
            .collect()
    }

    pub fn outputs(&self) -> Vec<f64> {
        self.errors.iter().map(|d| self.config.target - d).collect()
    }
}

pub(crate) fn ones(t: usize) -> DMatrix<f64> {
    DMatrix::from_element(t, t, 1.0)
}

pub(crate) fn error_coupling(errors: &[f64], gamma: f64, step: f64) -> DMatrix<f64> {
    let t = errors.len();
    DMatrix::from_fn(t, t, |a, b| if a > b { gamma * step * errors[b] } else { 0.0 })
}

/// Sampling-free fixed point of the layer field equations and the output `f(t) = ⟨g^L(t) h^L(t)⟩/γ`.
///
/// Every map is causal, so undamped sweeps settle at least one more step per sweep.
/// Steps that have not settled yet carry zero error, which keeps early sweeps bounded.
pub fn solve_deep_linear_saddle(config: &DeepLinearConfig, grid: &TimeGrid) -> Result<DeepLinearState> {
    config.validate(grid)?;
    let t_len = grid.num_steps();
    let l = config.hidden_layers();
    let mut state = DeepLinearState {
        config: *config,
        grid: *grid,
        feature: vec![ones(t_len); l],
        gradient: vec![ones(t_len); l],
        forward_response: vec![DMatrix::zeros(t_len, t_len); l - 1],
        backward_response: vec![DMatrix::zeros(t_len, t_len); l - 1],
        errors: vec![config.target; t_len],
        iterations: 0,
        residual: f64::INFINITY,
    };
    let beta = config.damping;
    let mix = |old: &mut DMatrix<f64>, new: &DMatrix<f64>| -> f64 {
        let change = (&*old - new).amax();
        *old = &*old * (1.0 - beta) + new * beta;
        change
    };
    for iter in 1..=config.max_iters {
        let layers = (1..=l)
            .map(|k| {
                let (c, d) = state.couplings(k);
                layer_moments(&c, &d, &state.feature_below(k), &state.gradient_above(k))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut change: f64 = 0.0;
        for (k, lm) in layers.iter().enumerate() {
            change = change.max(mix(&mut state.feature[k], &lm.feature));
            change = change.max(mix(&mut state.gradient[k], &lm.gradient));
            if k + 1 < l {
                change = change.max(mix(&mut state.forward_response[k], &lm.forward_response));
            }
            if k > 0 {
                change = change.max(mix(&mut state.backward_response[k - 1], &lm.backward_response));
            }
        }
        let top = &layers[l - 1].cross;
        // responses lag one sweep per layer, so the settled prefix grows by one step every `depth` sweeps
        let settled = iter / config.depth;
        for t in 0..t_len {
            let new = if t <= settled { config.target - top[(t, t)] / config.gamma } else { 0.0 };
            change = change.max((new - state.errors[t]).abs());
            state.errors[t] = (1.0 - beta) * state.errors[t] + beta * new;
        }
        state.iterations = iter;
        state.residual = change;
        if !change.is_finite() {
            return Err(DmftError::Divergence {
                step: iter,
                context: "deep linear fixed point".into(),
            });
        }
        if change < config.tol {
            return Ok(state);
        }
    }
    Err(DmftError::NoConvergence {
        iterations: config.max_iters,
        residuals: vec![state.residual],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::whitened::{solve_signal, SignalScheme};

    #[test]
    fn depth_two_matches_signal_map() {
        let grid = TimeGrid::gradient_flow(0.05, 40).unwrap();
        for gamma in [0.5, 1.5] {
            let s = solve_deep_linear_saddle(&DeepLinearConfig::new(2, gamma, 1.0), &grid).unwrap();
            let w = solve_signal(gamma, 1.0, &grid, SignalScheme::Discrete).unwrap();
            for (a, b) in s.errors.iter().zip(w.errors()) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in s.ntk().iter().zip(w.kernels()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn weak_coupling_keeps_unit_kernels() {
        let grid = TimeGrid::gradient_flow(0.1, 12).unwrap();
        let s = solve_deep_linear_saddle(&DeepLinearConfig::new(4, 1e-6, 1.0), &grid).unwrap();
        for k in s.feature.iter().chain(&s.gradient) {
            assert!((k - ones(12)).amax() < 1e-4);
        }
        // lazy rate is the initial NTK, L + 1
        assert!((s.ntk()[5] - 4.0).abs() < 1e-4);
    }

    #[test]
    fn responses_are_causal_and_kernels_symmetric() {
        let grid = TimeGrid::gradient_flow(0.1, 16).unwrap();
        let s = solve_deep_linear_saddle(&DeepLinearConfig::new(4, 1.0, 1.0), &grid).unwrap();
        for r in s.forward_response.iter().chain(&s.backward_response) {
            assert!(crate::grid::is_strictly_lower(r, 1e-14));
            assert!(r.amax() > 1e-3);
        }
        for k in s.feature.iter().chain(&s.gradient) {
            assert!((k - k.transpose()).amax() < 1e-12);
            assert!(crate::grid::min_eigenvalue(k) > -1e-10);
        }
        assert!(s.errors[15].abs() < 0.1 * s.errors[0]);
    }

    #[test]
    fn rejects_shallow_or_long_runs() {
        let grid = TimeGrid::gradient_flow(0.1, 8).unwrap();
        assert!(solve_deep_linear_saddle(&DeepLinearConfig::new(1, 1.0, 1.0), &grid).is_err());
        let long = TimeGrid::gradient_flow(0.1, MAX_STEPS + 1).unwrap();
        assert!(solve_deep_linear_saddle(&DeepLinearConfig::new(3, 1.0, 1.0), &long).is_err());
    }
}
