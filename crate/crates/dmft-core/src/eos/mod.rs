//! Two-layer linear training at large learning rate, where the kernel can sharpen to `2/η`.

mod fluctuations;
mod mean_field;

pub use fluctuations::{discrete_blocks, variance_discrete, variance_reduced, EosBlocks, EosVariance};
pub use mean_field::{
    iterate_mean_field, mean_field_step, EosConfig, EosTrajectory, StabilityDiagnostics, DIVERGENCE_BOUND,
    ONSET_MARGIN,
};
