use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use super::mean_field::EosTrajectory;
use crate::error::{DmftError, Result};
use crate::grid::{is_strictly_lower, TimeGrid};
use crate::linalg::{norm1, sandwich, CONDITION_LIMIT};
use crate::two_layer::closed_form_linear;

/// Per-neuron noise and sensitivity blocks of the discrete linear process.
///
/// Noise coordinates are `[f(0), K(0), …, K(T-1)]`; `d[(t, s)] = ∂⟨K_t⟩/∂Δ_s / η`.
#[derive(Debug, Clone)]
pub struct EosBlocks {
    pub grid: TimeGrid,
    pub gamma: f64,
    pub kappa: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl EosBlocks {
    pub fn kappa_kernel(&self) -> DMatrix<f64> {
        let t = self.grid.num_steps();
        self.kappa.view((1, 1), (t, t)).into_owned()
    }
}

/// `v±(t+1) = (1 ± ηγΔ_t) v±(t)` along the trajectory, with Wick moments for `κ`.
pub fn discrete_blocks(trajectory: &EosTrajectory) -> Result<EosBlocks> {
    let cfg = trajectory.config;
    if (cfg.initial_kernel - 2.0).abs() > 1e-12 {
        return Err(DmftError::Config(format!(
            "fluctuation blocks assume K0 = 2 (unit fields), got {}",
            cfg.initial_kernel
        )));
    }
    if trajectory.errors.iter().any(|v| !v.is_finite()) {
        return Err(DmftError::Config("trajectory is not finite".into()));
    }
    let grid = TimeGrid::discrete(cfg.eta, trajectory.len())?;
    let cf = closed_form_linear(&trajectory.errors, cfg.gamma, &grid)?;
    let t_len = grid.num_steps();
    let mut kappa = DMatrix::zeros(t_len + 1, t_len + 1);
    kappa[(0, 0)] = if cfg.gamma > 0.0 { cf.var_f0 } else { 0.0 };
    for t in 0..t_len {
        kappa[(0, t + 1)] = cf.cov_f0_kernel[t];
        kappa[(t + 1, 0)] = cf.cov_f0_kernel[t];
    }
    kappa.view_mut((1, 1), (t_len, t_len)).copy_from(&cf.kappa);
    debug_assert!(is_strictly_lower(&cf.d, 0.0));
    Ok(EosBlocks {
        grid,
        gamma: cfg.gamma,
        kappa,
        d: cf.d,
    })
}

/// Leading-order `N·Var` of the error and kernel over steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EosVariance {
    pub delta: Vec<f64>,
    pub kernel: Vec<f64>,
    /// `2T x 2T` over `[δΔ, δK]`; absent for the reduced solve.
    #[serde(skip)]
    pub propagator: Option<DMatrix<f64>>,
}

/// Linear response of the finite-width recursion around the trajectory:
/// `δΔ_{t+1} = a_t δΔ_t - ηΔ_t δK_t` with `a_t = 1 - ηK_t - η²γ²(2yΔ_t - 3Δ_t²)`,
/// `δK_t = η Σ_{s<t} D(t,s) δΔ_s + ξ_t`, and `δΔ_0 = -δf(0)`.
///
/// Past the threshold the `c₋` field collapses and this memory form carries a
/// growing mode that exact noise never excites; round-off does, so an
/// ill-conditioned `U` is reported rather than regularized. [`variance_reduced`]
/// gives the same quantity stably.
pub fn variance_discrete(blocks: &EosBlocks, trajectory: &EosTrajectory) -> Result<EosVariance> {
    let t_len = trajectory.len();
    if blocks.grid.num_steps() != t_len || blocks.kappa.nrows() != t_len + 1 {
        return Err(DmftError::Dimension(format!(
            "blocks cover {} steps, trajectory {t_len}",
            blocks.grid.num_steps()
        )));
    }
    let cfg = trajectory.config;
    if !(cfg.gamma > 0.0) {
        return Err(DmftError::Config("initial output variance needs gamma > 0".into()));
    }
    let (eta, y) = (cfg.eta, cfg.target);
    let g2 = cfg.gamma * cfg.gamma;
    let dim = 2 * t_len;
    let mut u = DMatrix::identity(dim, dim);
    for t in 1..t_len {
        let (d, k) = (trajectory.errors[t - 1], trajectory.kernels[t - 1]);
        u[(t, t - 1)] = -(1.0 - eta * k - eta * eta * g2 * (2.0 * y * d - 3.0 * d * d));
        u[(t, t_len + t - 1)] = eta * d;
    }
    for t in 0..t_len {
        for s in 0..t {
            u[(t_len + t, s)] = -eta * blocks.d[(t, s)];
        }
    }
    let mut e = DMatrix::zeros(dim, t_len + 1);
    e[(0, 0)] = -1.0;
    for t in 0..t_len {
        e[(t_len + t, t + 1)] = 1.0;
    }
    let u_inv = u.clone().lu().try_inverse();
    let condition = u_inv.as_ref().map_or(f64::INFINITY, |i| norm1(&u) * norm1(i));
    let u_inv = match u_inv {
        Some(i) if condition <= CONDITION_LIMIT => i,
        _ => {
            return Err(DmftError::Singular {
                condition,
                context: "discrete response matrix".into(),
            })
        }
    };
    let propagator = sandwich(&(&u_inv * e), &blocks.kappa);
    Ok(EosVariance {
        delta: (0..t_len).map(|t| propagator[(t, t)]).collect(),
        kernel: (0..t_len).map(|t| propagator[(t_len + t, t_len + t)]).collect(),
        propagator: Some(propagator),
    })
}

/// Jacobian of one finite-width step in `(Δ, K)`, which is a closed map on one point.
fn step_jacobian(d: f64, k: f64, y: f64, eta: f64, gamma: f64) -> Matrix2<f64> {
    let g2 = gamma * gamma;
    let e2 = eta * eta * g2;
    Matrix2::new(
        1.0 - eta * k - e2 * (2.0 * y * d - 3.0 * d * d),
        -eta * d,
        2.0 * e2 * d * k + 4.0 * eta * g2 * (y - 2.0 * d),
        1.0 + e2 * d * d,
    )
}

/// Same leading-order variance from the tangent map of `(Δ, K)`, started from
/// the initial covariance of `(-f(0), K(0))` in the blocks.
pub fn variance_reduced(blocks: &EosBlocks, trajectory: &EosTrajectory) -> Result<EosVariance> {
    let t_len = trajectory.len();
    if blocks.kappa.nrows() != t_len + 1 {
        return Err(DmftError::Dimension(format!(
            "blocks cover {} steps, trajectory {t_len}",
            blocks.grid.num_steps()
        )));
    }
    let cfg = trajectory.config;
    if !(cfg.gamma > 0.0) {
        return Err(DmftError::Config("initial output variance needs gamma > 0".into()));
    }
    let k = &blocks.kappa;
    let mut cov = Matrix2::new(k[(0, 0)], -k[(0, 1)], -k[(0, 1)], k[(1, 1)]);
    let (mut delta, mut kernel) = (Vec::with_capacity(t_len), Vec::with_capacity(t_len));
    for t in 0..t_len {
        delta.push(cov[(0, 0)]);
        kernel.push(cov[(1, 1)]);
        let j = step_jacobian(trajectory.errors[t], trajectory.kernels[t], cfg.target, cfg.eta, cfg.gamma);
        cov = j * cov * j.transpose();
    }
    Ok(EosVariance {
        delta,
        kernel,
        propagator: None,
    })
}
