//! Experiment configuration, orchestration, result files and report tables
//! for the test-time adaptation protocol.

pub mod config;
pub mod error;
pub mod plot;
pub mod report;
pub mod runner;

pub use error::CliError;
