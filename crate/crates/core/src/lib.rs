//! Kernel-balancing population weights for survey data.
pub mod balancing;
pub mod calibration;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod kernel;
pub mod linalg;
pub mod simulation;
pub mod spectral;

pub use error::{KpopError, Result};
