//! Constrained differential dynamic programming with analytic parameter
//! gradients, and inverse reinforcement learning built on top of it.

pub mod active_set;
pub mod autodiff;
pub mod benchmarks;
pub mod ddp;
pub mod demo;
pub mod gradient;
pub mod irl_closed;
pub mod ioc;
pub mod irl_open;
pub mod linalg;
pub mod oracles;
pub mod pdp;
pub mod pipeline;
pub mod problem;
pub mod scalar;
#[cfg(test)]
mod toys;

pub use linalg::{Mat, Vector};
pub use problem::{Dims, OcProblem, Trajectory};

/// Version of this library, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
