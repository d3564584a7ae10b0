//! Load generator: runs a scenario against an in-process simulator and
//! gateway on loopback and measures both legs.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tokio::net::TcpStream;
use wotgw_core::codec::{minified, MappingDictionary};
use wotgw_core::gateway::{DeviceSpec, GatewayConfig, GatewayServer, MappingSpec, ResolvedConfig};
use wotgw_core::http::{Conn, Request};
use wotgw_core::sim::{serve, SimConfig};
use wotgw_core::socks::Family;

use crate::scenario::{BenchReport, BenchScenario};
use crate::CliError;

pub const BENCH_DEVICE: &str = "bench-device";
pub const BENCH_TTL_SECONDS: f64 = 60.0;

/// A report plus the raw per-request latencies of the measured phase.
#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub report: BenchReport,
    pub latencies_ms: Vec<f64>,
    /// Every distinct response body a client received.
    pub bodies: BTreeSet<Vec<u8>>,
}

/// Request bodies for the warmup phase and for each client. A single body
/// is used everywhere; an array is a pool sampled with the seed.
pub fn request_schedule(s: &BenchScenario) -> (Vec<Vec<u8>>, Vec<Vec<Vec<u8>>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut next = || match &s.request_body {
        Value::Array(pool) => minified(&pool[rng.random_range(0..pool.len())]).into_bytes(),
        one => minified(one).into_bytes(),
    };
    let warmup = (0..s.warmup_requests).map(|_| next()).collect();
    let clients = (0..s.clients)
        .map(|_| (0..s.requests_per_client).map(|_| next()).collect())
        .collect();
    (warmup, clients)
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn bench_request(body: &[u8]) -> Request {
    Request::new("POST", &format!("/devices/{BENCH_DEVICE}/power"))
        .with_header("Content-Type", "application/json")
        .with_body(body.to_vec())
}

#[derive(Default)]
struct WorkerResult {
    latencies_ms: Vec<f64>,
    hits: u64,
    errors: u64,
    bytes: u64,
    bodies: BTreeSet<Vec<u8>>,
}

async fn worker(gateway: SocketAddr, bodies: Vec<Vec<u8>>) -> WorkerResult {
    let mut out = WorkerResult::default();
    let mut conn: Option<Conn<TcpStream>> = None;
    for body in bodies {
        let started = Instant::now();
        if conn.is_none() {
            match TcpStream::connect(gateway).await {
                Ok(s) => {
                    let _ = s.set_nodelay(true);
                    conn = Some(Conn::new(s));
                }
                Err(_) => {
                    out.errors += 1;
                    continue;
                }
            }
        }
        let c = conn.as_mut().expect("connected above");
        let (r0, w0) = (c.bytes_read, c.bytes_written);
        let result = match c.send_request(&bench_request(&body)).await {
            Ok(()) => c.read_response().await,
            Err(e) => Err(e),
        };
        out.latencies_ms.push(started.elapsed().as_secs_f64() * 1000.0);
        out.bytes += (c.bytes_read - r0) + (c.bytes_written - w0);
        match result {
            Ok(Some(resp)) => {
                let close = resp.wants_close();
                if resp.header("x-wot-cache") == Some("hit") {
                    out.hits += 1;
                }
                if !resp.is_success() {
                    out.errors += 1;
                }
                if close {
                    conn = None;
                }
                out.bodies.insert(resp.body);
            }
            _ => {
                out.errors += 1;
                conn = None;
            }
        }
    }
    out
}

fn gateway_config(s: &BenchScenario, device: SocketAddr, mapping: &MappingDictionary) -> GatewayConfig {
    let mut cfg = GatewayConfig::default();
    cfg.gateway.listen_v4 = None;
    cfg.gateway.listen_v6 = Some("[::1]:0".parse().expect("literal"));
    cfg.gateway.probe_interval_seconds = 0.0;
    cfg.gateway.relay_enabled = false;
    let latency_ms = (s.device_latency.ceil() as u64).saturating_mul(4);
    cfg.gateway.request_timeout_ms = latency_ms.saturating_add(1000).max(2000);
    cfg.cache.enabled = s.cache_enabled;
    cfg.cache.default_ttl_seconds = BENCH_TTL_SECONDS;
    cfg.dos.enabled = false;
    cfg.socks.enabled = false;
    let inline = (!mapping.is_empty()).then(|| {
        MappingSpec::Inline(
            mapping
                .entries()
                .map(|(l, s)| (l.to_owned(), Value::String(s.to_owned())))
                .collect(),
        )
    });
    cfg.devices = vec![DeviceSpec {
        id: BENCH_DEVICE.into(),
        endpoint: device.to_string(),
        mapping: inline,
        ttl_seconds: Some(BENCH_TTL_SECONDS),
        health_path: None,
    }];
    cfg
}

/// Runs warmup then the measured phase and reports both legs.
pub async fn run_bench(s: &BenchScenario) -> Result<BenchOutcome, CliError> {
    s.validate()?;
    let mapping = if s.codec_enabled {
        MappingDictionary::power_sensor()
    } else {
        MappingDictionary::empty("bench")
    };
    let sim = serve(SimConfig {
        bind: "[::1]:0".parse().expect("literal"),
        mapping: mapping.clone(),
        base_latency: s.device_latency(),
        failure_rate: 0.0,
        seed: s.seed,
        power_save_idle: Duration::from_secs(24 * 3600),
        wake_latency: Duration::ZERO,
        ..SimConfig::default()
    })
    .await
    .map_err(|e| CliError::Runtime(format!("starting simulator: {e}")))?;

    let resolved = ResolvedConfig::resolve(gateway_config(s, sim.local_addr(), &mapping), None)
        .map_err(|e| CliError::Runtime(format!("gateway config: {e}")))?;
    let mut gateway = GatewayServer::start(resolved)
        .await
        .map_err(|e| CliError::Runtime(format!("starting gateway: {e}")))?;
    let addr = gateway
        .local_addr(Family::V6)
        .ok_or_else(|| CliError::Runtime("gateway has no listener".into()))?;

    let (warmup, per_client) = request_schedule(s);
    if !warmup.is_empty() {
        let w = worker(addr, warmup).await;
        if w.errors > 0 {
            return Err(CliError::Runtime(format!("{} warmup requests failed", w.errors)));
        }
    }

    let (req0, in0, out0) = (sim.request_count(), sim.bytes_in(), sim.bytes_out());
    let tasks: Vec<_> = per_client
        .into_iter()
        .map(|bodies| tokio::spawn(worker(addr, bodies)))
        .collect();
    let mut latencies = Vec::with_capacity(s.total_requests());
    let (mut hits, mut errors, mut client_bytes) = (0u64, 0u64, 0u64);
    let mut bodies = BTreeSet::new();
    for t in tasks {
        let w = t.await.map_err(|e| CliError::Runtime(format!("worker failed: {e}")))?;
        latencies.extend(w.latencies_ms);
        hits += w.hits;
        errors += w.errors;
        client_bytes += w.bytes;
        bodies.extend(w.bodies);
    }
    let device_requests = sim.request_count() - req0;
    let device_bytes = (sim.bytes_in() - in0) + (sim.bytes_out() - out0);
    gateway.stop();
    sim.stop().await;

    let total = latencies.len();
    let mean = if total == 0 {
        0.0
    } else {
        latencies.iter().sum::<f64>() / total as f64
    };
    let mut sorted = latencies.clone();
    sorted.sort_by(f64::total_cmp);
    let report = BenchReport {
        scenario: s.name.clone(),
        mean_response_ms: mean,
        p50_response_ms: percentile(&sorted, 50.0),
        p95_response_ms: percentile(&sorted, 95.0),
        p99_response_ms: percentile(&sorted, 99.0),
        device_requests_observed: device_requests,
        cache_hit_ratio: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        bytes_on_device_leg: device_bytes,
        bytes_on_client_leg: client_bytes,
        errors,
    };
    Ok(BenchOutcome {
        report,
        latencies_ms: latencies,
        bodies,
    })
}
