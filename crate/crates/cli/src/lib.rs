//! Command-line harness for the solver, simulator and certificates: JSON
//! configs in, CSV and JSON artifacts out.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::Context;
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
