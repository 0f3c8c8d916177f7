//! Simulation of non-Lipschitz homogeneous ODE systems, their stochastic
//! regularization near the singular point, and the statistics of solutions
//! continued past a finite-time blowup.

pub mod analysis;
pub mod cli;
pub mod ensemble;
pub mod error;
pub mod fields;
pub mod integrate;
pub(crate) mod quad;
pub mod regularize;
pub mod rng;

pub use error::{FlowError, Result};
pub use fields::{HomogeneousField, UnitVec, Vector};
