use nalgebra::{DMatrix, DVector};

use super::action::{ActionLayout, Block, DeepLinearAction};
use super::saddle::DeepLinearState;
use crate::error::{DmftError, Result};
use crate::linalg::{inverse_conditioned, sandwich};

/// Leading-order covariance of the primal coordinates, scaled by width.
#[derive(Debug, Clone)]
pub struct DeepLinearPropagator {
    pub layout: ActionLayout,
    pub gamma: f64,
    /// `N Cov` over `[H¹..H^L, G¹..G^L, F]` in [`ActionLayout`] order.
    pub sigma: DMatrix<f64>,
    feature_diag: Vec<Vec<f64>>,
    gradient_diag: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Relative size below which the primal-primal Hessian block counts as zero.
pub const PRIMAL_BLOCK_TOL: f64 = 1e-10;

/// Primal block of `Σ = -(∇²S)⁻¹` through the kernel/response split.
///
/// The kernel coordinates `q1` (primal, dual) have Hessian `[[0, Uᵀ], [U, κ]]`, so
/// `Σ⁰ = [[U⁻¹κU⁻ᵀ, -U⁻¹], [-U⁻ᵀ, 0]]`. The responses `q2` enter through the Schur complement
/// `Σ₁₁ = Σ⁰ - Σ⁰ H₁₂ (H₂₂ + H₂₁ Σ⁰ H₁₂)⁻¹ H₂₁ Σ⁰`, of which only primal rows are formed.
pub fn schur_covariance(hessian: &DMatrix<f64>, layout: &ActionLayout, warnings: &mut Vec<String>) -> Result<DMatrix<f64>> {
    let np = layout.num_primal();
    let n1 = layout.num_kernel();
    let n2 = layout.num_response();
    let primal = hessian.view((0, 0), (np, np));
    let scale = hessian.amax();
    if primal.amax() > PRIMAL_BLOCK_TOL * scale {
        return Err(DmftError::Config(format!(
            "primal Hessian block is {:e}, expected zero at a saddle with vanishing duals",
            primal.amax()
        )));
    }
    let u = hessian.view((np, 0), (np, np)).into_owned();
    let kappa = hessian.view((np, np), (np, np)).into_owned();
    let u_inv = inverse_conditioned(&u, "dual-primal Hessian block U", warnings)?;
    let sigma0 = sandwich(&u_inv, &kappa);
    if n2 == 0 {
        return Ok(sigma0);
    }
    let h12_primal = hessian.view((0, n1), (np, n2));
    let h12_dual = hessian.view((np, n1), (np, n2));
    let h22 = hessian.view((n1, n1), (n2, n2));
    // Σ⁰H₁₂ split by rows: primal rows a, dual rows b = -U⁻ᵀ H₁₂,primal
    let a = &sigma0 * h12_primal - &u_inv * h12_dual;
    let b = -(u_inv.transpose() * h12_primal);
    let schur = h22 + h12_primal.transpose() * &a + h12_dual.transpose() * &b;
    let schur_inv = inverse_conditioned(&schur, "response Schur complement", warnings)?;
    Ok(&sigma0 - &a * schur_inv * a.transpose())
}

impl DeepLinearPropagator {
    pub fn from_state(state: &DeepLinearState) -> Result<Self> {
        let action = DeepLinearAction::new(state);
        let x = action.saddle_point(state);
        let hessian = action.hessian(&x)?;
        let mut warnings = Vec::new();
        let sigma = schur_covariance(&hessian, &action.layout, &mut warnings)?;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let diag = |m: &DMatrix<f64>| m.diagonal().iter().copied().collect::<Vec<_>>();
        Ok(Self {
            layout: action.layout,
            gamma: state.config.gamma,
            sigma,
            feature_diag: state.feature.iter().map(diag).collect(),
            gradient_diag: state.gradient.iter().map(diag).collect(),
            warnings,
        })
    }

    fn equal_time_index(&self, block: Block, t: usize) -> usize {
        self.layout.offset(block) + self.layout.sym_index(t, t)
    }

    /// `N Cov(H^ℓ(t,t), H^ℓ(s,s))`.
    pub fn feature_covariance(&self, layer: usize) -> DMatrix<f64> {
        let t_len = self.layout.steps;
        DMatrix::from_fn(t_len, t_len, |a, b| {
            self.sigma[(
                self.equal_time_index(Block::Feature(layer), a),
                self.equal_time_index(Block::Feature(layer), b),
            )]
        })
    }

    /// `N Var H^ℓ(t,t)`.
    pub fn feature_variance(&self, layer: usize) -> Vec<f64> {
        self.feature_covariance(layer).diagonal().iter().copied().collect()
    }

    /// `N Var G^ℓ(t,t)`.
    pub fn gradient_variance(&self, layer: usize) -> Vec<f64> {
        (0..self.layout.steps)
            .map(|t| {
                let i = self.equal_time_index(Block::Gradient(layer), t);
                self.sigma[(i, i)]
            })
            .collect()
    }

    /// `N Var Δ(t)`, from `Δ = y - F/γ`.
    pub fn error_variance(&self) -> Vec<f64> {
        let off = self.layout.offset(Block::Output);
        (0..self.layout.steps)
            .map(|t| self.sigma[(off + t, off + t)] / (self.gamma * self.gamma))
            .collect()
    }

    /// Gradient of `K(t) = Σ_ℓ G^{ℓ+1}(t,t) H^ℓ(t,t)` over the primal coordinates.
    fn ntk_direction(&self, t: usize) -> DVector<f64> {
        let l = self.layout.layers;
        let mut v = DVector::zeros(self.sigma.nrows());
        for k in 1..=l {
            let g_above = if k == l { 1.0 } else { self.gradient_diag[k][t] };
            let h_below = if k == 1 { 1.0 } else { self.feature_diag[k - 2][t] };
            v[self.equal_time_index(Block::Feature(k), t)] += g_above;
            v[self.equal_time_index(Block::Gradient(k), t)] += h_below;
        }
        v
    }

    /// `N Cov(K(t), K(s))`.
    pub fn ntk_covariance(&self) -> DMatrix<f64> {
        let t_len = self.layout.steps;
        let dirs = DMatrix::from_columns(&(0..t_len).map(|t| self.ntk_direction(t)).collect::<Vec<_>>());
        dirs.transpose() * &self.sigma * dirs
    }

    /// `N Var K(t)`.
    pub fn ntk_variance(&self) -> Vec<f64> {
        self.ntk_covariance().diagonal().iter().copied().collect()
    }
}
