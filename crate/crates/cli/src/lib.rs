//! Benchmark scenarios, reports and comparisons for the `wotgw` binary.

pub mod bench;
pub mod compare;
pub mod plot;
pub mod scenario;

use thiserror::Error;

pub use bench::{run_bench, BenchOutcome};
pub use compare::{compare_reports, Comparison, MetricDelta};
pub use scenario::{BenchReport, BenchScenario};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Mismatch(_) => 1,
        }
    }
}
