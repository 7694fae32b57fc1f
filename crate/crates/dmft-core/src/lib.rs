//! Finite-width fluctuations of trained networks from dynamical mean field theory.

pub mod activation;
pub mod deep_linear;
pub mod eos;
pub mod error;
pub mod finite_net;
pub mod grid;
pub mod lazy;
pub mod linalg;
pub mod report;
pub mod rng;
pub mod saddle;
pub mod two_layer;
pub mod whitened;

pub use error::{DmftError, Result};
