//! Time discretization, index flattening and the shared order-parameter containers.

mod containers;
mod time;

pub use containers::{
    is_strictly_lower, is_symmetric, min_eigenvalue, symmetrize, HessianBlocks, OrderParameterSet,
    Propagator,
};
pub use time::{
    causal_integral, flatten_index, quadrature_weights, unflatten_index, StepMode, TimeGrid,
};
