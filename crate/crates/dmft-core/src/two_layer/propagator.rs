use nalgebra::DMatrix;

use super::blocks::{InitialOutput, TwoLayerBlocks};
use crate::error::{DmftError, Result};
use crate::finite_net::LossReduction;
use crate::grid::Propagator;
use crate::linalg::{inverse_conditioned, sandwich};

/// Largest flat dimension accepted for the dense assembly.
pub const MAX_FLAT_DIM: usize = 2000;

/// Infinite-width trajectories the linearization is taken around.
#[derive(Debug, Clone, Copy)]
pub struct SaddleView<'a> {
    /// `P x T`.
    pub errors: &'a DMatrix<f64>,
    /// `P x P` per step.
    pub ntk: &'a [DMatrix<f64>],
    /// `P x Q` per step, when held-out points exist.
    pub test_ntk: Option<&'a [DMatrix<f64>]>,
    pub reduction: LossReduction,
}

/// Assembled linear response `U x = E n` and its solution `Σ = U⁻¹ E κ Eᵀ U⁻ᵀ`.
#[derive(Debug, Clone)]
pub struct TwoLayerPropagator {
    pub propagator: Propagator,
    pub u_matrix: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Builds the response matrix over `[δΔ, δf⋆, δK, δK⋆]` and inverts it.
///
/// Rows, with `c` the loss-reduction factor and all sums over `s < t`:
/// `δΔ_μ(t) + step·c Σ [K_μν(s) δΔ_ν(s) + Δ_ν(s) δK_μν(s)] = -δf_μ(0)`,
/// `δf⋆_q(t) - step·c Σ [K⋆_νq(s) δΔ_ν(s) + Δ_ν(s) δK⋆_νq(s)] = δf⋆_q(0)`,
/// `δK(t) - step Σ D(t,s) δΔ(s) = ξ(t)` and likewise for `K⋆`.
pub fn assemble_and_invert(
    blocks: &TwoLayerBlocks,
    saddle: SaddleView<'_>,
    initial: InitialOutput,
) -> Result<TwoLayerPropagator> {
    let layout = &blocks.layout;
    let t_len = blocks.grid.num_steps();
    let eta = blocks.grid.step_size();
    let (p, q) = (layout.num_train, layout.num_test);
    let (np_, nq) = (layout.pairs.len(), layout.test_pairs.len());
    let c = saddle.reduction.factor(p) * eta;
    if saddle.errors.nrows() != p || saddle.errors.ncols() != t_len || saddle.ntk.len() != t_len {
        return Err(DmftError::Dimension("saddle trajectories do not match the blocks".into()));
    }
    if q > 0 && saddle.test_ntk.map_or(true, |k| k.len() != t_len) {
        return Err(DmftError::Missing("train-test NTK for held-out points".into()));
    }
    let off_f = p * t_len;
    let off_k = off_f + q * t_len;
    let off_ks = off_k + np_ * t_len;
    let dim = off_ks + nq * t_len;
    if dim > MAX_FLAT_DIM {
        return Err(DmftError::Config(format!("flat dimension {dim} exceeds {MAX_FLAT_DIM}")));
    }

    let mut u = DMatrix::identity(dim, dim);
    for mu in 0..p {
        for t in 0..t_len {
            let row = mu * t_len + t;
            for s in 0..t {
                for nu in 0..p {
                    u[(row, nu * t_len + s)] += c * saddle.ntk[s][(mu, nu)];
                    let kp = layout.pair_index(mu, nu);
                    u[(row, off_k + kp * t_len + s)] += c * saddle.errors[(nu, s)];
                }
            }
        }
    }
    for qq in 0..q {
        let test_ntk = saddle.test_ntk.unwrap_or(&[]);
        for t in 0..t_len {
            let row = off_f + qq * t_len + t;
            for s in 0..t {
                for nu in 0..p {
                    u[(row, nu * t_len + s)] -= c * test_ntk[s][(nu, qq)];
                    let kp = layout.test_pair_index(nu, qq);
                    u[(row, off_ks + kp * t_len + s)] -= c * saddle.errors[(nu, s)];
                }
            }
        }
    }
    for r in 0..np_ * t_len {
        for col in 0..p * t_len {
            u[(off_k + r, col)] -= eta * blocks.d[(r, col)];
        }
    }
    for r in 0..nq * t_len {
        for col in 0..p * t_len {
            u[(off_ks + r, col)] -= eta * blocks.d_star[(r, col)];
        }
    }

    // source map E from per-neuron noise coordinates to equation right-hand sides
    let m = blocks.kappa.nrows();
    let mut e = DMatrix::zeros(dim, m);
    if initial == InitialOutput::Included {
        for mu in 0..p {
            for t in 0..t_len {
                e[(mu * t_len + t, mu)] = -1.0;
            }
        }
        for qq in 0..q {
            for t in 0..t_len {
                e[(off_f + qq * t_len + t, p + qq)] = 1.0;
            }
        }
    }
    for r in 0..(np_ + nq) * t_len {
        e[(off_k + r, p + q + r)] = 1.0;
    }

    let mut warnings = Vec::new();
    let u_inv = inverse_conditioned(&u, "two-layer response matrix", &mut warnings)?;
    let sigma = sandwich(&(&u_inv * e), &blocks.kappa);

    let mut propagator = Propagator::new();
    let ranges = [
        ("delta", 0, p * t_len),
        ("f_star", off_f, q * t_len),
        ("K", off_k, np_ * t_len),
        ("K_star", off_ks, nq * t_len),
    ];
    for (i, &(la, oa, na)) in ranges.iter().enumerate() {
        for &(lb, ob, nb) in &ranges[i..] {
            if na > 0 && nb > 0 {
                propagator.insert(la, lb, sigma.view((oa, ob), (na, nb)).into_owned());
            }
        }
    }
    Ok(TwoLayerPropagator {
        propagator,
        u_matrix: u,
        warnings,
    })
}

/// Leading-order mean error and mean squared error at width `N`.
#[derive(Debug, Clone)]
pub struct MeanCorrection {
    /// `P x T`.
    pub mean_error: DMatrix<f64>,
    /// `Σ_μ ⟨Δ_μ(t)²⟩`.
    pub mse: Vec<f64>,
}

/// Integrates `⟨Δ⟩(t+1) = ⟨Δ⟩ - step·c Σ_ν [⟨K_μν⟩⟨Δ_ν⟩ + Σ^{K_μν Δ_ν}(t,t)/N]`.
///
/// `mean_ntk` defaults to the saddle NTK when the `O(1/N)` kernel mean shift is unknown.
pub fn mean_error_correction(
    propagator: &Propagator,
    mean_ntk: &[DMatrix<f64>],
    targets: &[f64],
    step: f64,
    width: usize,
    reduction: LossReduction,
) -> Result<MeanCorrection> {
    let p = targets.len();
    let t_len = mean_ntk.len();
    let layout = super::blocks::PointLayout::new(p, 0);
    let cross = propagator
        .block("K", "delta")
        .ok_or_else(|| DmftError::Missing("K-delta propagator block".into()))?;
    let sigma_delta = propagator
        .block("delta", "delta")
        .ok_or_else(|| DmftError::Missing("delta propagator block".into()))?;
    let c = reduction.factor(p) * step;
    let nf = width as f64;
    let mut mean = DMatrix::zeros(p, t_len);
    for mu in 0..p {
        mean[(mu, 0)] = targets[mu];
    }
    for t in 0..t_len.saturating_sub(1) {
        for mu in 0..p {
            let mut rate = 0.0;
            for nu in 0..p {
                let kp = layout.pair_index(mu, nu);
                rate += mean_ntk[t][(mu, nu)] * mean[(nu, t)] + cross[(kp * t_len + t, nu * t_len + t)] / nf;
            }
            mean[(mu, t + 1)] = mean[(mu, t)] - c * rate;
        }
    }
    let mse = (0..t_len)
        .map(|t| {
            (0..p)
                .map(|mu| mean[(mu, t)].powi(2) + sigma_delta[(mu * t_len + t, mu * t_len + t)] / nf)
                .sum()
        })
        .collect();
    Ok(MeanCorrection { mean_error: mean, mse })
}
