use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::signal::{signal_step, SignalSolution};
use crate::error::{DmftError, Result};
use crate::grid::TimeGrid;
use crate::linalg::sandwich;

/// Equal-time fluctuation statistics of whitened two-layer linear training, scaled by `N`.
///
/// Signal sector: `(A, B, f)` along the target. Orthogonal sector, one per direction
/// `a ⊥ y`: `p = ⟨h_a h_y⟩` and `g = ⟨h_a z⟩/γ = f_a`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectorMoments {
    pub grid: TimeGrid,
    pub gamma: f64,
    /// `N Var Δ_y(t)`.
    pub signal_variance: Vec<f64>,
    /// `N Var Δ_a(t)` for any single orthogonal direction.
    pub orthogonal_variance: Vec<f64>,
    /// `N ⟨δΔ_y(t)⟩` from the signal sector's own second-order terms.
    pub mean_shift_signal: Vec<f64>,
    /// `N ⟨δΔ_y(t)⟩` induced by one orthogonal direction; multiply by `P - 1`.
    pub mean_shift_per_orthogonal: Vec<f64>,
}

impl SectorMoments {
    /// `Δ¹_y(t)` for `P` whitened points.
    pub fn mean_shift(&self, num_points: usize) -> Vec<f64> {
        let extra = num_points.saturating_sub(1) as f64;
        self.mean_shift_signal
            .iter()
            .zip(&self.mean_shift_per_orthogonal)
            .map(|(s, o)| s + extra * o)
            .collect()
    }
}

fn signal_jacobian(m: [f64; 3], y: f64, gamma: f64, eta: f64) -> Matrix3<f64> {
    let [a, b, f] = m;
    let d = y - f;
    let g2 = gamma * gamma;
    let e2 = eta * eta * g2;
    Matrix3::new(
        1.0,
        e2 * d * d,
        2.0 * eta * g2 * (d - f) - 2.0 * e2 * d * b,
        e2 * d * d,
        1.0,
        2.0 * eta * g2 * (d - f) - 2.0 * e2 * d * a,
        eta * d,
        eta * d,
        1.0 - eta * (a + b) + e2 * (d * d - 2.0 * d * f),
    )
}

/// `½ Σ_ij S_ij ∂²G/∂m_i∂m_j`; central differences are exact because the map is cubic.
fn half_hessian_contraction(m: [f64; 3], s: &Matrix3<f64>, y: f64, gamma: f64, eta: f64) -> Vector3<f64> {
    let h = 1e-2;
    let g = |dm: [f64; 3]| {
        let x = [m[0] + dm[0], m[1] + dm[1], m[2] + dm[2]];
        Vector3::from_column_slice(&signal_step(x, y, gamma, eta))
    };
    let unit = |i: usize, s: f64| {
        let mut v = [0.0; 3];
        v[i] = s;
        v
    };
    let both = |i: usize, si: f64, j: usize, sj: f64| {
        let mut v = [0.0; 3];
        v[i] += si;
        v[j] += sj;
        v
    };
    let centre = g([0.0; 3]);
    let mut acc = Vector3::<f64>::zeros();
    for i in 0..3 {
        let dii = (g(unit(i, h)) - centre * 2.0 + g(unit(i, -h))) / (h * h);
        acc += dii * s[(i, i)];
        for j in i + 1..3 {
            let dij = (g(both(i, h, j, h)) - g(both(i, h, j, -h)) - g(both(i, -h, j, h)) + g(both(i, -h, j, -h)))
                / (4.0 * h * h);
            acc += dij * (2.0 * s[(i, j)]);
        }
    }
    acc * 0.5
}

/// First-order covariances and second-order mean shifts of the exact finite-width moment map,
/// propagated along a discrete signal solution.
pub fn sector_moments(signal: &SignalSolution) -> Result<SectorMoments> {
    let gamma = signal.gamma;
    if !(gamma > 0.0) {
        return Err(DmftError::Config("fluctuations need gamma > 0 (Var f(0) = 1/(γ²N))".into()));
    }
    let eta = signal.grid.step_size();
    let y = signal.target;
    let g2 = gamma * gamma;
    let t_len = signal.grid.num_steps();

    let mut s_sig = Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0 / g2));
    let mut s_orth = Matrix2::from_diagonal(&Vector2::new(1.0, 1.0 / g2));
    let mut mu_self = Vector3::<f64>::zeros();
    let mut mu_orth = Vector3::<f64>::zeros();
    let mut out = SectorMoments {
        grid: signal.grid,
        gamma,
        signal_variance: Vec::with_capacity(t_len),
        orthogonal_variance: Vec::with_capacity(t_len),
        mean_shift_signal: Vec::with_capacity(t_len),
        mean_shift_per_orthogonal: Vec::with_capacity(t_len),
    };
    for j in 0..t_len {
        out.signal_variance.push(s_sig[(2, 2)]);
        out.orthogonal_variance.push(s_orth[(1, 1)]);
        out.mean_shift_signal.push(-mu_self[2]);
        out.mean_shift_per_orthogonal.push(-mu_orth[2]);
        let m = signal.moments[j];
        let arr = [m.a, m.b, m.f];
        let d = y - m.f;
        let j_sig = signal_jacobian(arr, y, gamma, eta);
        let e2 = eta * eta * g2;
        let j_orth = Matrix2::new(
            1.0,
            eta * g2 * (d - m.f) - e2 * d * m.b,
            eta * d,
            1.0 - eta * (1.0 + m.b) - e2 * d * m.f,
        );
        let (sgg, spg) = (s_orth[(1, 1)], s_orth[(0, 1)]);
        let forcing = Vector3::new(
            0.0,
            -2.0 * eta * g2 * sgg + e2 * (sgg - 2.0 * d * spg),
            -eta * spg - e2 * d * sgg,
        );
        mu_self = j_sig * mu_self + half_hessian_contraction(arr, &s_sig, y, gamma, eta);
        mu_orth = j_sig * mu_orth + forcing;
        s_sig = j_sig * s_sig * j_sig.transpose();
        s_orth = j_orth * s_orth * j_orth.transpose();
    }
    Ok(out)
}

/// Uncoupled variances and sensitivities of both sectors in moment units (`C = γf`, `q = γg`).
///
/// With `ξ` the free (fixed-`Δ`) evolution of the initial moment fluctuations,
/// `γ δΔ(t) + η Σ_{s<t} D(t,s) δΔ(s) = -ξ(t)` in each sector, and `κ = N Cov(ξ)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhitenedBlocks {
    pub grid: TimeGrid,
    pub gamma: f64,
    pub kappa_signal: DMatrix<f64>,
    pub kappa_orthogonal: DMatrix<f64>,
    pub d_signal: DMatrix<f64>,
    pub d_orthogonal: DMatrix<f64>,
}

/// Builds `κ_y`, `κ_⊥`, `D_y`, `D_⊥` from the signal trajectory without sampling.
pub fn blocks_whitened(signal: &SignalSolution) -> Result<WhitenedBlocks> {
    let gamma = signal.gamma;
    let eta = signal.grid.step_size();
    let eps = eta * gamma;
    let t_len = signal.grid.num_steps();
    let y = signal.target;
    // moment-unit trajectories
    let traj: Vec<(f64, f64, f64, f64)> = signal
        .moments
        .iter()
        .map(|m| (m.a, m.b, gamma * m.f, y - m.f))
        .collect();

    let free_sig = |t: usize| {
        let (_, _, _, d) = traj[t];
        let (e1, e2) = (eps * d, eps * eps * d * d);
        Matrix3::new(1.0, e2, 2.0 * e1, e2, 1.0, 2.0 * e1, e1, e1, 1.0 + e2)
    };
    let kick_sig = |t: usize| {
        let (a, b, c, d) = traj[t];
        let e2 = eps * eps * d;
        Vector3::new(2.0 * eps * c + 2.0 * e2 * b, 2.0 * eps * c + 2.0 * e2 * a, eps * (a + b) + 2.0 * e2 * c)
    };
    let free_orth = |t: usize| {
        let e1 = eps * traj[t].3;
        Matrix2::new(1.0, e1, e1, 1.0)
    };
    let kick_orth = |t: usize| {
        let (_, b, c, d) = traj[t];
        Vector2::new(eps * c + eps * eps * d * b, eps * (1.0 + b) + eps * eps * d * c)
    };

    // ξ(t) = e·Φ(t,0) m₀, so κ = rows of e·Φ(t,0) contracted with Cov(m₀)
    let mut row_sig = Vector3::new(0.0, 0.0, 1.0).transpose();
    let mut row_orth = Vector2::new(0.0, 1.0).transpose();
    let mut phi_sig = Matrix3::identity();
    let mut phi_orth = Matrix2::identity();
    let mut lsig = DMatrix::zeros(t_len, 3);
    let mut lorth = DMatrix::zeros(t_len, 2);
    for t in 0..t_len {
        let r = row_sig * phi_sig;
        let ro = row_orth * phi_orth;
        for i in 0..3 {
            lsig[(t, i)] = r[i];
        }
        for i in 0..2 {
            lorth[(t, i)] = ro[i];
        }
        phi_sig = free_sig(t) * phi_sig;
        phi_orth = free_orth(t) * phi_orth;
    }
    row_sig = Vector3::new(0.0, 0.0, 1.0).transpose();
    row_orth = Vector2::new(0.0, 1.0).transpose();
    let cov_sig = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 2.0, 1.0]));
    let kappa_signal = sandwich(&lsig, &cov_sig);
    let kappa_orthogonal = &lorth * lorth.transpose();

    let mut d_signal = DMatrix::zeros(t_len, t_len);
    let mut d_orthogonal = DMatrix::zeros(t_len, t_len);
    for s in 0..t_len {
        let mut v = kick_sig(s);
        let mut w = kick_orth(s);
        for t in s + 1..t_len {
            d_signal[(t, s)] = (row_sig * v)[0] / eta;
            d_orthogonal[(t, s)] = (row_orth * w)[0] / eta;
            v = free_sig(t) * v;
            w = free_orth(t) * w;
        }
    }
    Ok(WhitenedBlocks {
        grid: signal.grid,
        gamma,
        kappa_signal,
        kappa_orthogonal,
        d_signal,
        d_orthogonal,
    })
}

/// Two-time error covariances `Σ = (γI + ηD)⁻¹ κ (γI + ηD)⁻ᵀ` of both sectors (`N`-scaled).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhitenedPropagator {
    pub signal: DMatrix<f64>,
    pub orthogonal: DMatrix<f64>,
}

fn lower_sandwich(gamma: f64, eta: f64, d: &DMatrix<f64>, kappa: &DMatrix<f64>, label: &str) -> Result<DMatrix<f64>> {
    let n = d.nrows();
    let u = DMatrix::identity(n, n) * gamma + d * eta;
    let min_diag = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    let max_abs = u.amax();
    if !(min_diag > 1e-12 * max_abs.max(1.0)) {
        return Err(DmftError::Singular {
            condition: max_abs / min_diag,
            context: format!("{label} response matrix γI + ηD"),
        });
    }
    let x = u
        .solve_lower_triangular(kappa)
        .ok_or_else(|| DmftError::Singular {
            condition: f64::INFINITY,
            context: label.to_string(),
        })?;
    let sigma = u
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| DmftError::Singular {
            condition: f64::INFINITY,
            context: label.to_string(),
        })?;
    Ok((&sigma + sigma.transpose()) * 0.5)
}

pub fn propagator_whitened(blocks: &WhitenedBlocks) -> Result<WhitenedPropagator> {
    let eta = blocks.grid.step_size();
    Ok(WhitenedPropagator {
        signal: lower_sandwich(blocks.gamma, eta, &blocks.d_signal, &blocks.kappa_signal, "signal")?,
        orthogonal: lower_sandwich(blocks.gamma, eta, &blocks.d_orthogonal, &blocks.kappa_orthogonal, "orthogonal")?,
    })
}
