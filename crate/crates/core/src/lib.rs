//! Multilevel wavelet decomposition and heterogeneous multi-branch neural
//! networks for sensor-based human activity recognition.

pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
