use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// One benchmark scenario. `device_latency` is in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchScenario {
    pub name: String,
    pub clients: usize,
    pub requests_per_client: usize,
    /// The request body, or an array of bodies to draw from with `seed`.
    pub request_body: Value,
    pub codec_enabled: bool,
    pub cache_enabled: bool,
    pub device_latency: f64,
    pub warmup_requests: usize,
    pub seed: u64,
}

impl BenchScenario {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |why: &str| Err(CliError::Config(format!("scenario {:?}: {why}", self.name)));
        if self.clients == 0 {
            return bad("clients must be positive");
        }
        if self.requests_per_client == 0 {
            return bad("requests_per_client must be positive");
        }
        if !(self.device_latency.is_finite() && self.device_latency >= 0.0) {
            return bad("device_latency must be a non-negative number of milliseconds");
        }
        if matches!(&self.request_body, Value::Array(pool) if pool.is_empty()) {
            return bad("request_body pool is empty");
        }
        Ok(())
    }

    pub fn device_latency(&self) -> Duration {
        Duration::from_secs_f64(self.device_latency / 1000.0)
    }

    pub fn total_requests(&self) -> usize {
        self.clients * self.requests_per_client
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading scenario {}: {e}", path.display())))?;
        let scenario: BenchScenario =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("scenario {}: {e}", path.display())))?;
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Result of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub scenario: String,
    pub mean_response_ms: f64,
    pub p50_response_ms: f64,
    pub p95_response_ms: f64,
    pub p99_response_ms: f64,
    pub device_requests_observed: u64,
    pub cache_hit_ratio: f64,
    pub bytes_on_device_leg: u64,
    pub bytes_on_client_leg: u64,
    pub errors: u64,
}

impl BenchReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading report {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("report {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}
