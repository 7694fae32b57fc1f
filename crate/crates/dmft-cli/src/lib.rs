//! Config, pipeline and presets behind the `dmft` binary.

pub mod config;
pub mod pipeline;
pub mod presets;
