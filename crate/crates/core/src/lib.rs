//! Test-time adaptation with gradient-aligned layer selection.

pub mod adapt;
pub mod baselines;
mod error;
pub mod experiment;
pub mod gala;
pub mod metrics;
pub mod nn;
pub mod shiftbench;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
