//! File formats, run configuration and commands around `mo3tr-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod output;

pub use error::{CliError, Result};
