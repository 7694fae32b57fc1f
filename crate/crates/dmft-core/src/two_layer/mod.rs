//! Finite-width fluctuations of two-layer networks on small datasets.

mod blocks;
mod closed_form;
mod propagator;

use nalgebra::DMatrix;

pub use blocks::{compute_blocks, InitialOutput, PointLayout, TwoLayerBlocks, MIN_KAPPA_SAMPLES};
pub use closed_form::{closed_form_linear, closed_form_linear_continuous, linear_saddle, LinearClosedForm, LinearSaddle};
pub use propagator::{
    assemble_and_invert, mean_error_correction, MeanCorrection, SaddleView, TwoLayerPropagator, MAX_FLAT_DIM,
};

use crate::error::{DmftError, Result};
use crate::finite_net::Dataset;
use crate::grid::TimeGrid;
use crate::saddle::{point_gram, solve_saddle, SaddleConfig, SaddleSolution};

/// Exact blocks for a linear net on a single point, packaged like the Monte Carlo estimate.
pub fn closed_form_blocks(cf: &LinearClosedForm, gamma: f64, grid: &TimeGrid) -> TwoLayerBlocks {
    let t_len = grid.num_steps();
    let mut kappa = DMatrix::zeros(t_len + 1, t_len + 1);
    kappa[(0, 0)] = if gamma > 0.0 { cf.var_f0 } else { 0.0 };
    for t in 0..t_len {
        kappa[(0, t + 1)] = cf.cov_f0_kernel[t];
        kappa[(t + 1, 0)] = cf.cov_f0_kernel[t];
        for s in 0..t_len {
            kappa[(t + 1, s + 1)] = cf.kappa[(t, s)];
        }
    }
    TwoLayerBlocks {
        layout: PointLayout::new(1, 0),
        grid: *grid,
        gamma,
        kappa,
        kappa_std_error: None,
        d: cf.d.clone(),
        d_star: DMatrix::zeros(0, t_len),
        d_std_error: DMatrix::zeros(t_len, t_len),
        d_star_std_error: DMatrix::zeros(0, t_len),
    }
}

/// Saddle, blocks and propagator for one configuration.
#[derive(Debug, Clone)]
pub struct TwoLayerTheory {
    pub saddle: SaddleSolution,
    pub blocks: TwoLayerBlocks,
    pub propagator: TwoLayerPropagator,
}

impl TwoLayerTheory {
    /// `Var X(t) ≈ Σ_X(t,t)/N` for `X ∈ {delta, f_star, K, K_star}`.
    pub fn variance(&self, label: &str, width: usize) -> Result<Vec<f64>> {
        self.propagator
            .propagator
            .variance(label, width)
            .ok_or_else(|| DmftError::Missing(format!("propagator block {label}")))
    }
}

pub fn two_layer_theory(
    config: &SaddleConfig,
    dataset: &Dataset,
    grid: &TimeGrid,
    initial: InitialOutput,
) -> Result<TwoLayerTheory> {
    if config.hidden_layers != 1 {
        return Err(DmftError::Config("two-layer theory needs hidden_layers = 1".into()));
    }
    let saddle = solve_saddle(config, dataset, grid)?;
    let gram = point_gram(dataset);
    let blocks = compute_blocks(&saddle.batch, &gram, false)?;
    let view = SaddleView {
        errors: &saddle.order.errors,
        ntk: &saddle.order.ntk,
        test_ntk: saddle.test.as_ref().map(|t| t.ntk.as_slice()),
        reduction: config.reduction,
    };
    let propagator = assemble_and_invert(&blocks, view, initial)?;
    Ok(TwoLayerTheory {
        saddle,
        blocks,
        propagator,
    })
}
