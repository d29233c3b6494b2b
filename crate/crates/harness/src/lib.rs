//! Experiment harness: dataset ingestion, configuration, checkpoints,
//! reports and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod digits;
pub mod error;
pub mod report;

pub use error::{HarnessError, Result};
