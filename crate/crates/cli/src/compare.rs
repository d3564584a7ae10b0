use std::fmt::Write as _;

use serde::Serialize;

use crate::scenario::BenchReport;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricDelta {
    pub metric: &'static str,
    pub a: f64,
    pub b: f64,
    /// `b - a`
    pub delta: f64,
    /// `(b - a) / a`; absent when `a` is zero and the values differ.
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metrics: Vec<MetricDelta>,
}

/// Shared scenario name: the part before an optional `@variant` suffix.
pub fn base_name(scenario: &str) -> &str {
    scenario.split_once('@').map_or(scenario, |(base, _)| base)
}

fn delta(metric: &'static str, a: f64, b: f64) -> MetricDelta {
    let d = b - a;
    let relative = if d == 0.0 {
        Some(0.0)
    } else if a == 0.0 {
        None
    } else {
        Some(d / a)
    };
    MetricDelta {
        metric,
        a,
        b,
        delta: d,
        relative,
    }
}

/// Per-metric deltas of `b` against `a`. Both reports must come from the
/// same scenario (variants such as `power@cache-on` and `power@cache-off`
/// count as the same scenario).
pub fn compare_reports(a: &BenchReport, b: &BenchReport) -> Result<Comparison, CliError> {
    if base_name(&a.scenario) != base_name(&b.scenario) {
        return Err(CliError::Mismatch(format!(
            "reports are for different scenarios: {:?} vs {:?}",
            a.scenario, b.scenario
        )));
    }
    let metrics = vec![
        delta("mean_response_ms", a.mean_response_ms, b.mean_response_ms),
        delta("p50_response_ms", a.p50_response_ms, b.p50_response_ms),
        delta("p95_response_ms", a.p95_response_ms, b.p95_response_ms),
        delta("p99_response_ms", a.p99_response_ms, b.p99_response_ms),
        delta(
            "device_requests_observed",
            a.device_requests_observed as f64,
            b.device_requests_observed as f64,
        ),
        delta("cache_hit_ratio", a.cache_hit_ratio, b.cache_hit_ratio),
        delta(
            "bytes_on_device_leg",
            a.bytes_on_device_leg as f64,
            b.bytes_on_device_leg as f64,
        ),
        delta(
            "bytes_on_client_leg",
            a.bytes_on_client_leg as f64,
            b.bytes_on_client_leg as f64,
        ),
        delta("errors", a.errors as f64, b.errors as f64),
    ];
    Ok(Comparison {
        a: a.scenario.clone(),
        b: b.scenario.clone(),
        metrics,
    })
}

impl Comparison {
    pub fn get(&self, metric: &str) -> Option<&MetricDelta> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "a: {}\nb: {}", self.a, self.b);
        let _ = writeln!(
            out,
            "{:<26} {:>14} {:>14} {:>14} {:>10}",
            "metric", "a", "b", "delta", "relative"
        );
        for m in &self.metrics {
            let rel = match m.relative {
                Some(r) => format!("{:+.1}%", r * 100.0),
                None => "n/a".into(),
            };
            let _ = writeln!(
                out,
                "{:<26} {:>14.3} {:>14.3} {:>+14.3} {:>10}",
                m.metric, m.a, m.b, m.delta, rel
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(name: &str, mean: f64, device_bytes: u64) -> BenchReport {
        BenchReport {
            scenario: name.into(),
            mean_response_ms: mean,
            p50_response_ms: mean,
            p95_response_ms: mean,
            p99_response_ms: mean,
            device_requests_observed: 10,
            cache_hit_ratio: 0.0,
            bytes_on_device_leg: device_bytes,
            bytes_on_client_leg: 100,
            errors: 0,
        }
    }

    #[test]
    fn identical_reports_have_zero_deltas() {
        let r = report("p", 12.5, 400);
        let c = compare_reports(&r, &r).unwrap();
        assert!(c.metrics.iter().all(|m| m.delta == 0.0 && m.relative == Some(0.0)));
    }

    #[test]
    fn deltas_are_b_minus_a() {
        let c = compare_reports(&report("p@off", 50.0, 400), &report("p@on", 5.0, 300)).unwrap();
        let mean = c.get("mean_response_ms").unwrap();
        assert_eq!((mean.delta, mean.relative), (-45.0, Some(-0.9)));
        assert_eq!(c.get("bytes_on_device_leg").unwrap().delta, -100.0);
        assert!(c.table().contains("mean_response_ms"));
    }

    #[test]
    fn mismatched_scenarios_rejected() {
        assert!(compare_reports(&report("p", 1.0, 1), &report("q", 1.0, 1)).is_err());
        assert_eq!(base_name("power@cache-on"), "power");
        assert_eq!(base_name("power"), "power");
    }

    #[test]
    fn zero_baseline_has_no_relative_change() {
        let mut a = report("p", 1.0, 0);
        a.errors = 0;
        let mut b = a.clone();
        b.errors = 3;
        assert_eq!(compare_reports(&a, &b).unwrap().get("errors").unwrap().relative, None);
    }
}
