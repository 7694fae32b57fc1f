//! Exact saddle and propagator for deep linear networks on one training point.

mod action;
mod propagator;
mod saddle;

pub use action::{ActionLayout, Block, DeepLinearAction};
pub use propagator::{schur_covariance, DeepLinearPropagator};
pub use saddle::{
    layer_moments, solve_deep_linear_saddle, DeepLinearConfig, DeepLinearState, LayerMoments, MAX_STEPS,
};
