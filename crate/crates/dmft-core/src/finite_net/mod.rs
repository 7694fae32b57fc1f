//! Finite-width μP networks trained by Euler gradient flow or discrete GD.

mod ensemble;
mod network;
mod online;
mod rate;
mod train;

pub use ensemble::{cross_covariance, run_ensemble, run_members, series_stats, CovarianceEstimate, EnsembleRecord, SeriesStats};
pub use network::{forward, init_network, Dataset, ForwardPass, NetworkConfig, Parameters};
pub use online::{run_online_ensemble, train_online, OnlineConfig, OnlineTrajectory};
pub use rate::{commuting_rate_matrix, fit_training_rate, RateFit};
pub use train::{gradient_check, loss_gradient, train, LossGradient, LossReduction, RecordOptions, TrainOptions, TrainingTrajectory};
