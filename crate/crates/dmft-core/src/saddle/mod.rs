//! Infinite-width saddle: Monte Carlo single-site fields and the damped fixed-point iteration.

mod fields;
mod solve;
mod sources;

pub use fields::{solve_single_site, ErrorDrive, FieldSampleBatch, KernelState, LayerFields, ResolvedPass, SourceBatch, SourceDraws};
pub use solve::{
    integrate_predictions, lazy_initial_guess, point_gram, response_functions, solve_saddle, update_order_params,
    ConvergenceReport, SaddleConfig, SaddleSolution, TestPointSolution,
};
pub use sources::{broadcast_static, colour, sample_gp, standard_normals};
