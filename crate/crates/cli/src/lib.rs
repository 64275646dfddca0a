//! Operator entry points: verification suites, cost curves, roofline
//! classification and desk-scale latency runs.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
