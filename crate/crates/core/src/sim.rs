//! A miniature power-sensor web server standing in for an embedded device.
//!
//! It speaks only its own coded vocabulary: requests and responses use the
//! short keys of its mapping dictionary. Latency, seeded failure injection
//! and a power-save idle mode make it useful for gateway tests and benches.

use std::io;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tracing::{debug, info};

use crate::codec::{minified, MappingDictionary};
use crate::http::{Conn, Request, Response};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSensorReading {
    #[serde(rename = "deviceName")]
    pub device_name: String,
    #[serde(rename = "currentWatts")]
    pub current_watts: f64,
    #[serde(rename = "KWh")]
    pub kwh: f64,
    #[serde(rename = "maxWattage")]
    pub max_wattage: f64,
}

#[derive(Debug, Error)]
pub enum ReadingsError {
    #[error("reading {index} ({name:?}): {why}")]
    Invalid {
        index: usize,
        name: String,
        why: &'static str,
    },
    #[error("readings file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("readings file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl PowerSensorReading {
    pub fn new(name: &str, current_watts: f64, kwh: f64, max_wattage: f64) -> Self {
        PowerSensorReading {
            device_name: name.to_owned(),
            current_watts,
            kwh,
            max_wattage,
        }
    }

    fn check(&self) -> Result<(), &'static str> {
        if !(self.current_watts.is_finite() && self.kwh.is_finite() && self.max_wattage.is_finite()) {
            return Err("values must be finite");
        }
        if self.current_watts < 0.0 || self.current_watts > self.max_wattage {
            return Err("currentWatts must lie in [0, maxWattage]");
        }
        if self.kwh < 0.0 {
            return Err("KWh must be non-negative");
        }
        Ok(())
    }
}

pub fn validate_readings(readings: &[PowerSensorReading]) -> Result<(), ReadingsError> {
    for (index, r) in readings.iter().enumerate() {
        r.check().map_err(|why| ReadingsError::Invalid {
            index,
            name: r.device_name.clone(),
            why,
        })?;
    }
    Ok(())
}

/// The two-appliance meter used throughout the examples.
pub fn default_readings() -> Vec<PowerSensorReading> {
    vec![
        PowerSensorReading::new("ComputerAndScreen", 50.52, 5.835, 100.56),
        PowerSensorReading::new("Fridge", 86.28, 4.421, 288.92),
    ]
}

/// Loads a JSON array of long-key reading objects.
pub fn load_readings(path: impl AsRef<Path>) -> Result<Vec<PowerSensorReading>, ReadingsError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ReadingsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let readings: Vec<PowerSensorReading> = serde_json::from_str(&text)?;
    validate_readings(&readings)?;
    Ok(readings)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("request must be {{\"values\":[{{\"NoOfDevices\":[n]}}]}}")]
    Shape,
    #[error("NoOfDevices must be a non-negative integer")]
    BadCount,
}

/// Answers a coded power query with the coded prefix of `readings`.
pub fn answer_power_query(
    coded_request: &Value,
    mapping: &MappingDictionary,
    readings: &[PowerSensorReading],
) -> Result<Value, QueryError> {
    if uses_long_keys(coded_request, mapping) {
        return Err(QueryError::Shape);
    }
    let request = mapping.decode_keys(coded_request);
    let values = request
        .as_object()
        .filter(|o| o.len() == 1)
        .and_then(|o| o.get("values"))
        .and_then(Value::as_array)
        .ok_or(QueryError::Shape)?;
    let count = values
        .iter()
        .find_map(|v| v.as_object()?.get("NoOfDevices"))
        .ok_or(QueryError::Shape)?;
    let n = match count {
        Value::Array(items) if items.len() == 1 => items[0].as_u64().ok_or(QueryError::BadCount)?,
        other => other.as_u64().ok_or(QueryError::BadCount)?,
    };
    let take = readings.len().min(usize::try_from(n).unwrap_or(usize::MAX));
    let long = serde_json::to_value(&readings[..take]).expect("readings serialize");
    Ok(mapping
        .encode_keys(&long)
        .expect("reading keys never collide with their own short codes"))
}

/// A coded device only understands the short form of mapped keys.
fn uses_long_keys(doc: &Value, mapping: &MappingDictionary) -> bool {
    match doc {
        Value::Object(map) => map
            .iter()
            .any(|(k, v)| mapping.short_code(k).is_some() || uses_long_keys(v, mapping)),
        Value::Array(items) => items.iter().any(|v| uses_long_keys(v, mapping)),
        _ => false,
    }
}

/// Seeded per-request failure decisions: every request consumes exactly
/// one draw, and fails when the draw falls below the failure rate.
#[derive(Debug, Clone)]
pub struct FailurePlan {
    rng: ChaCha8Rng,
}

impl FailurePlan {
    pub fn new(seed: u64) -> Self {
        FailurePlan {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_fails(&mut self, failure_rate: f64) -> bool {
        let draw: f64 = self.rng.random();
        draw < failure_rate
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub bind: SocketAddr,
    pub readings: Vec<PowerSensorReading>,
    pub mapping: MappingDictionary,
    pub base_latency: Duration,
    pub failure_rate: f64,
    pub seed: u64,
    pub power_save_idle: Duration,
    pub wake_latency: Duration,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            readings: default_readings(),
            mapping: MappingDictionary::power_sensor(),
            base_latency: Duration::ZERO,
            failure_rate: 0.0,
            seed: 0,
            power_save_idle: Duration::from_secs(30),
            wake_latency: Duration::from_millis(100),
        }
    }
}

struct Behavior {
    latency: Duration,
    failure_rate: f64,
    plan: FailurePlan,
    last_request: Instant,
}

struct SimShared {
    readings: Vec<PowerSensorReading>,
    mapping: MappingDictionary,
    power_save_idle: Duration,
    wake_latency: Duration,
    behavior: Mutex<Behavior>,
    requests: AtomicU64,
    failures: AtomicU64,
    wakeups: AtomicU64,
    bytes_in: AtomicU64,
    bytes_out: AtomicU64,
}

/// A running simulator. Dropping the handle stops it.
pub struct SimHandle {
    addr: SocketAddr,
    shared: Arc<SimShared>,
    stop: watch::Sender<bool>,
    task: Option<JoinHandle<()>>,
}

impl SimHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Requests received, failed ones included.
    pub fn request_count(&self) -> u64 {
        self.shared.requests.load(Ordering::SeqCst)
    }

    pub fn failure_count(&self) -> u64 {
        self.shared.failures.load(Ordering::SeqCst)
    }

    pub fn wakeup_count(&self) -> u64 {
        self.shared.wakeups.load(Ordering::SeqCst)
    }

    /// Wire bytes received and sent by the device.
    pub fn bytes_in(&self) -> u64 {
        self.shared.bytes_in.load(Ordering::SeqCst)
    }

    pub fn bytes_out(&self) -> u64 {
        self.shared.bytes_out.load(Ordering::SeqCst)
    }

    /// Changes latency and failure rate for subsequent requests. The
    /// failure sequence continues from the same seeded stream.
    pub fn inject_behavior(&self, latency: Duration, failure_rate: f64) {
        let mut b = self.shared.behavior.lock().unwrap_or_else(|e| e.into_inner());
        b.latency = latency;
        b.failure_rate = failure_rate.clamp(0.0, 1.0);
    }

    /// Stops accepting, drops open connections and waits for the accept
    /// loop to exit so that the port refuses connections on return.
    pub async fn stop(mut self) {
        self.shutdown().await;
    }

    async fn shutdown(&mut self) {
        let _ = self.stop.send(true);
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for SimHandle {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
        if let Some(task) = self.task.take() {
            task.abort();
        }
    }
}

/// Starts serving `POST /power` and `GET /status`.
pub async fn serve(config: SimConfig) -> io::Result<SimHandle> {
    validate_readings(&config.readings).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let listener = crate::net::bind_listener(config.bind)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(SimShared {
        readings: config.readings,
        mapping: config.mapping,
        power_save_idle: config.power_save_idle,
        wake_latency: config.wake_latency,
        behavior: Mutex::new(Behavior {
            latency: config.base_latency,
            failure_rate: config.failure_rate.clamp(0.0, 1.0),
            plan: FailurePlan::new(config.seed),
            last_request: Instant::now(),
        }),
        requests: AtomicU64::new(0),
        failures: AtomicU64::new(0),
        wakeups: AtomicU64::new(0),
        bytes_in: AtomicU64::new(0),
        bytes_out: AtomicU64::new(0),
    });
    let (stop, mut stop_rx) = watch::channel(false);
    let task_shared = shared.clone();
    let task = tokio::spawn(async move {
        let mut conns = tokio::task::JoinSet::new();
        loop {
            tokio::select! {
                accepted = listener.accept() => {
                    let Ok((stream, peer)) = accepted else { continue };
                    let _ = stream.set_nodelay(true);
                    conns.spawn(handle_connection(stream, peer, task_shared.clone()));
                }
                Some(_) = conns.join_next(), if !conns.is_empty() => {}
                _ = stop_rx.wait_for(|s| *s) => break,
            }
        }
        conns.shutdown().await;
    });
    info!(%addr, "device simulator listening");
    Ok(SimHandle {
        addr,
        shared,
        stop,
        task: Some(task),
    })
}

enum Plan {
    Fail,
    Answer(Duration),
}

async fn handle_connection(stream: TcpStream, peer: SocketAddr, shared: Arc<SimShared>) {
    let mut conn = Conn::new(stream);
    loop {
        let before = conn.bytes_read;
        let req = match conn.read_request().await {
            Ok(Some(req)) => req,
            Ok(None) => return,
            Err(e) => {
                debug!(%peer, error = %e, "bad request to simulator");
                let _ = conn
                    .send_response(&Response::json(400, r#"{"error":"bad_request"}"#))
                    .await;
                return;
            }
        };
        shared.requests.fetch_add(1, Ordering::SeqCst);
        shared.bytes_in.fetch_add(conn.bytes_read - before, Ordering::SeqCst);

        let plan = {
            let mut b = shared.behavior.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let asleep = now.duration_since(b.last_request) >= shared.power_save_idle;
            b.last_request = now;
            let rate = b.failure_rate;
            if b.plan.next_fails(rate) {
                Plan::Fail
            } else {
                if asleep {
                    shared.wakeups.fetch_add(1, Ordering::SeqCst);
                }
                Plan::Answer(b.latency + if asleep { shared.wake_latency } else { Duration::ZERO })
            }
        };
        let delay = match plan {
            Plan::Fail => {
                shared.failures.fetch_add(1, Ordering::SeqCst);
                // Zero linger turns the close into a reset.
                let _ = socket2::SockRef::from(conn.get_ref()).set_linger(Some(Duration::ZERO));
                return;
            }
            Plan::Answer(d) => d,
        };
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
        let mut resp = respond(&shared, &req);
        let close = req.wants_close();
        if close {
            resp = resp.with_header("Connection", "close");
        }
        // counted before writing so the total is final once the peer has
        // the whole response
        let wire = resp.to_bytes();
        shared.bytes_out.fetch_add(wire.len() as u64, Ordering::SeqCst);
        if conn.write_all(&wire).await.is_err() {
            return;
        }
        if close {
            conn.shutdown().await;
            return;
        }
    }
}

fn coded_error(shared: &SimShared, status: u16, error: &str) -> Response {
    let body = shared
        .mapping
        .encode_keys(&json!({ "error": error }))
        .unwrap_or_else(|_| json!({ "error": error }));
    Response::json(status, minified(&body))
}

fn respond(shared: &SimShared, req: &Request) -> Response {
    let path = req.target.split('?').next().unwrap_or("");
    match (req.method.as_str(), path) {
        ("GET", "/status") => {
            let body = shared
                .mapping
                .encode_keys(&json!({"status": "ok"}))
                .unwrap_or_else(|_| json!({"status": "ok"}));
            Response::json(200, minified(&body))
        }
        ("POST", "/power") => {
            let Ok(doc) = serde_json::from_slice::<Value>(&req.body) else {
                return coded_error(shared, 400, "malformed_json");
            };
            match answer_power_query(&doc, &shared.mapping, &shared.readings) {
                Ok(v) => Response::json(200, minified(&v)),
                Err(QueryError::Shape) => coded_error(shared, 400, "unrecognized_request"),
                Err(QueryError::BadCount) => coded_error(shared, 400, "bad_count"),
            }
        }
        (_, "/status") | (_, "/power") => coded_error(shared, 405, "method_not_allowed"),
        _ => coded_error(shared, 404, "not_found"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn answers_two_device_query() {
        let dict = MappingDictionary::power_sensor();
        let out = answer_power_query(&parse(r#"{"values":[{"ND":[2]}]}"#), &dict, &default_readings()).unwrap();
        assert_eq!(
            minified(&out),
            r#"[{"DN":"ComputerAndScreen","CW":50.52,"KWh":5.835,"MW":100.56},{"DN":"Fridge","CW":86.28,"KWh":4.421,"MW":288.92}]"#
        );
    }

    #[test]
    fn zero_and_clamped_counts() {
        let dict = MappingDictionary::power_sensor();
        let readings = default_readings();
        let zero = answer_power_query(&parse(r#"{"values":[{"ND":[0]}]}"#), &dict, &readings).unwrap();
        assert_eq!(zero, json!([]));
        let many = answer_power_query(&parse(r#"{"values":[{"ND":[99]}]}"#), &dict, &readings).unwrap();
        assert_eq!(many.as_array().unwrap().len(), 2);
    }

    #[test]
    fn rejects_malformed_queries() {
        let dict = MappingDictionary::power_sensor();
        let r = default_readings();
        for bad in [r#"{}"#, r#"[]"#, r#"{"values":[]}"#, r#"{"values":[{"X":[1]}]}"#] {
            assert_eq!(
                answer_power_query(&parse(bad), &dict, &r),
                Err(QueryError::Shape),
                "{bad}"
            );
        }
        for bad in [
            r#"{"values":[{"ND":[-1]}]}"#,
            r#"{"values":[{"ND":[1.5]}]}"#,
            r#"{"values":[{"ND":["2"]}]}"#,
        ] {
            assert_eq!(
                answer_power_query(&parse(bad), &dict, &r),
                Err(QueryError::BadCount),
                "{bad}"
            );
        }
        // a long-key request is not understood by a coded device
        assert_eq!(
            answer_power_query(&parse(r#"{"values":[{"NoOfDevices":[1]}]}"#), &dict, &r),
            Err(QueryError::Shape)
        );
    }

    #[test]
    fn uncoded_device_speaks_long_keys() {
        let dict = MappingDictionary::empty("none");
        let out = answer_power_query(
            &parse(r#"{"values":[{"NoOfDevices":[1]}]}"#),
            &dict,
            &default_readings(),
        )
        .unwrap();
        assert_eq!(
            minified(&out),
            r#"[{"deviceName":"ComputerAndScreen","currentWatts":50.52,"KWh":5.835,"maxWattage":100.56}]"#
        );
    }

    #[test]
    fn reading_invariants() {
        assert!(validate_readings(&default_readings()).is_ok());
        assert!(validate_readings(&[PowerSensorReading::new("x", 10.0, 1.0, 5.0)]).is_err());
        assert!(validate_readings(&[PowerSensorReading::new("x", 1.0, -1.0, 5.0)]).is_err());
        assert!(validate_readings(&[PowerSensorReading::new("x", -1.0, 1.0, 5.0)]).is_err());
    }

    #[test]
    fn failure_plan_degenerate_rates() {
        let mut p = FailurePlan::new(7);
        assert!((0..100).all(|_| p.next_fails(1.0)));
        assert!((0..100).all(|_| !p.next_fails(0.0)));
    }
}
