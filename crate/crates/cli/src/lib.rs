//! Command-line experiments for total activation classifiers: data
//! preparation, training, evaluation and the downstream analyses.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use error::{CliError, Result};
