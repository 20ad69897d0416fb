//! Experiment and verification harness for the `asgo` optimizers.

pub mod config;
pub mod error;
pub mod runner;
pub mod verify;

pub use config::{ExperimentConfig, Grid, Schedule};
pub use error::BenchError;
