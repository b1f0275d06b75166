//! Command-line runner for catflow: dataset generation, training, sampling,
//! evaluation, identity checks and ablation sweeps.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod manifest;

pub use error::{CliError, Result};
