//! Two-layer linear networks on whitened data: signal and orthogonal fluctuation sectors.

mod loss;
mod sectors;
mod signal;

pub use loss::{expected_loss, online_map, LossExpansion, WhitenedTheory, VALIDITY_RATIO};
pub use sectors::{blocks_whitened, propagator_whitened, sector_moments, SectorMoments, WhitenedBlocks, WhitenedPropagator};
pub use signal::{signal_step, solve_signal, SignalMoments, SignalScheme, SignalSolution};
