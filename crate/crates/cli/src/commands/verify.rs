//! Run every acceptance check and write a per-check JSON report.

use std::path::Path;

use serde::Serialize;

use crate::checks::{run_all, CheckOutcome};
use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub failed: Vec<&'static str>,
    pub checks: Vec<CheckOutcome>,
}

pub fn run(cfg: &RunConfig) -> VerifyReport {
    let checks = run_all(cfg);
    let failed: Vec<&'static str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    VerifyReport { passed: failed.is_empty(), failed, checks }
}

pub fn write_json(report: &VerifyReport, path: &Path) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
