//! The gateway web server.
//!
//! Every client request for `/devices/{id}/{path}` runs the same pipeline:
//! guard, route, health check, cache lookup, key coding, forward (directly
//! or through the SOCKS relay when the device sits on the other address
//! family), key decoding, cache store. Device bodies reach clients only in
//! their long-key form.

mod config;
mod registry;
mod server;

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::sync::watch;
use tracing::{debug, info, warn};

pub use config::{
    valid_device_id, ConfigError, DeviceEndpoint, DeviceRecord, DeviceSpec, GatewayConfig, GatewaySection, Host,
    MappingSpec, ResolvedConfig,
};
pub use registry::{Device, DeviceRegistry, DeviceStatus, Health, RegistryError, Transition};
pub use server::{GatewayServer, StartError};

use crate::cache::{request_digest, CacheConfig, CacheEntry, CacheKey, CacheStats, PutOutcome, ResponseCache};
use crate::codec::minified;
use crate::guard::{client_id, DosGuard, GuardDecision};
use crate::http::{Conn, HttpError, Request, Response};
use crate::socks::{connect_through, ConnectRequest, Family, ResolverPolicy, SessionRegistry, TargetAddr};

pub const CACHE_HEADER: &str = "X-WoT-Cache";
pub const DEVICE_HEADER: &str = "X-WoT-Device";

/// Who sent a request and on which listener family it arrived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientContext {
    pub peer: SocketAddr,
    pub listener_family: Family,
}

impl ClientContext {
    pub fn new(peer: SocketAddr, listener_family: Family) -> Self {
        ClientContext { peer, listener_family }
    }
}

/// Where the gateway finds the SOCKS relay for cross-family forwarding.
#[derive(Clone)]
pub struct RelayRoute {
    pub v4: Option<SocketAddr>,
    pub v6: Option<SocketAddr>,
    pub sessions: Arc<SessionRegistry>,
}

impl RelayRoute {
    fn proxy_for(&self, family: Family) -> Option<SocketAddr> {
        match family {
            Family::V4 => self.v4.or(self.v6),
            Family::V6 => self.v6.or(self.v4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Direct,
    Relayed,
}

#[derive(Debug)]
pub enum ForwardError {
    Connect(io::Error),
    Io(io::Error),
    Timeout,
    Protocol(HttpError),
}

impl std::fmt::Display for ForwardError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ForwardError::Connect(e) => write!(f, "connect failed: {e}"),
            ForwardError::Io(e) => write!(f, "device i/o failed: {e}"),
            ForwardError::Timeout => f.write_str("device timed out"),
            ForwardError::Protocol(e) => write!(f, "device protocol error: {e}"),
        }
    }
}

impl std::error::Error for ForwardError {}

/// One completed device round trip.
#[derive(Debug)]
pub struct DeviceExchange {
    pub response: Response,
    pub route: Route,
    pub family: Family,
    pub bytes_out: u64,
    pub bytes_in: u64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    coalesced: AtomicU64,
    uncacheable: AtomicU64,
    guard_blocks: AtomicU64,
    device_requests: AtomicU64,
    device_failures: AtomicU64,
    direct_forwards: AtomicU64,
    relayed_forwards: AtomicU64,
    device_leg_bytes_out: AtomicU64,
    device_leg_bytes_in: AtomicU64,
    client_leg_bytes_in: AtomicU64,
    client_leg_bytes_out: AtomicU64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GatewayStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_hit_ratio: f64,
    pub coalesced: u64,
    pub uncacheable: u64,
    pub guard_blocks: u64,
    pub device_requests: u64,
    pub device_failures: u64,
    pub direct_forwards: u64,
    pub relayed_forwards: u64,
    pub device_leg_bytes_out: u64,
    pub device_leg_bytes_in: u64,
    pub client_leg_bytes_in: u64,
    pub client_leg_bytes_out: u64,
    pub relay_sessions: u64,
    pub relay_cross_family_sessions: u64,
    pub relay_active_sessions: usize,
    pub cache_entries: usize,
    pub cache_bytes: usize,
    pub guard_tracked_clients: usize,
}

type Flight = watch::Receiver<Option<Arc<Response>>>;

pub struct Gateway {
    settings: GatewaySection,
    cache_config: CacheConfig,
    cache: ResponseCache,
    guard: DosGuard,
    devices: DeviceRegistry,
    resolver: ResolverPolicy,
    relay: Option<RelayRoute>,
    base_dir: Option<PathBuf>,
    inflight: Mutex<HashMap<CacheKey, Flight>>,
    counters: Counters,
}

fn outage(status: u16, what: &str, device: &str) -> Response {
    Response::json(status, minified(&json!({"status": what, "device": device})))
}

fn json_response(status: u16, body: Value) -> Response {
    Response::json(status, minified(&body))
}

fn wants_no_cache(req: &Request) -> bool {
    let has = |name| {
        req.header(name)
            .is_some_and(|v| v.split(',').any(|t| t.trim().eq_ignore_ascii_case("no-cache")))
    };
    has("cache-control") || has("pragma")
}

fn parse_json_body(body: &[u8]) -> Option<Value> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return None;
    }
    serde_json::from_slice(body).ok()
}

/// Splits `/devices/{id}/{rest}` into the id and the device-side target.
pub fn split_device_target(target: &str) -> Option<(&str, String)> {
    let rest = target.strip_prefix("/devices/")?;
    let (path, query) = match rest.split_once('?') {
        Some((p, q)) => (p, Some(q)),
        None => (rest, None),
    };
    let (id, sub) = match path.split_once('/') {
        Some((id, sub)) => (id, sub),
        None => (path, ""),
    };
    if id.is_empty() {
        return None;
    }
    let mut device_target = format!("/{sub}");
    if let Some(q) = query {
        device_target.push('?');
        device_target.push_str(q);
    }
    Some((id, device_target))
}

impl Gateway {
    pub fn new(config: &ResolvedConfig, relay: Option<RelayRoute>) -> Arc<Self> {
        let gw = Gateway {
            settings: config.raw.gateway.clone(),
            cache_config: config.raw.cache,
            cache: ResponseCache::from_config(&config.raw.cache),
            guard: DosGuard::new(config.raw.dos),
            devices: DeviceRegistry::new(),
            resolver: config.resolver.clone(),
            relay: if config.raw.gateway.relay_enabled { relay } else { None },
            base_dir: config.base_dir.clone(),
            inflight: Mutex::new(HashMap::new()),
            counters: Counters::default(),
        };
        for d in &config.devices {
            gw.devices
                .register(d.clone(), false)
                .expect("resolved config has unique ids");
        }
        Arc::new(gw)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn guard(&self) -> &DosGuard {
        &self.guard
    }

    pub fn devices(&self) -> &DeviceRegistry {
        &self.devices
    }

    pub fn settings(&self) -> &GatewaySection {
        &self.settings
    }

    /// Registers a device; a replaced registration loses its cache entries.
    pub fn register_device(&self, record: DeviceRecord, replace: bool) -> Result<bool, RegistryError> {
        let id = record.device_id.clone();
        let replaced = self.devices.register(record, replace)?;
        if replaced {
            let n = self.cache.invalidate_device(&id);
            debug!(device = %id, invalidated = n, "device re-registered");
        }
        info!(device = %id, replaced, "device registered");
        Ok(replaced)
    }

    pub fn stats(&self) -> GatewayStats {
        let c = &self.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let hits = get(&c.cache_hits);
        let misses = get(&c.cache_misses);
        let relay = self.relay.as_ref().map(|r| r.sessions.stats()).unwrap_or_default();
        let cache: CacheStats = self.cache.stats();
        GatewayStats {
            requests: get(&c.requests),
            cache_hits: hits,
            cache_misses: misses,
            cache_hit_ratio: if hits + misses == 0 {
                0.0
            } else {
                hits as f64 / (hits + misses) as f64
            },
            coalesced: get(&c.coalesced),
            uncacheable: get(&c.uncacheable),
            guard_blocks: get(&c.guard_blocks),
            device_requests: get(&c.device_requests),
            device_failures: get(&c.device_failures),
            direct_forwards: get(&c.direct_forwards),
            relayed_forwards: get(&c.relayed_forwards),
            device_leg_bytes_out: get(&c.device_leg_bytes_out),
            device_leg_bytes_in: get(&c.device_leg_bytes_in),
            client_leg_bytes_in: get(&c.client_leg_bytes_in),
            client_leg_bytes_out: get(&c.client_leg_bytes_out),
            relay_sessions: relay.relayed,
            relay_cross_family_sessions: relay.cross_family,
            relay_active_sessions: relay.active,
            cache_entries: cache.entries,
            cache_bytes: cache.bytes,
            guard_tracked_clients: self.guard.tracked_clients(),
        }
    }

    pub(crate) fn count_client_bytes(&self, bytes_in: u64, bytes_out: u64) {
        self.counters.client_leg_bytes_in.fetch_add(bytes_in, Ordering::Relaxed);
        self.counters
            .client_leg_bytes_out
            .fetch_add(bytes_out, Ordering::Relaxed);
    }

    /// Runs the full request pipeline for one client request.
    pub async fn handle_request(&self, client: &ClientContext, req: Request) -> Response {
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        let path = req.target.split('?').next().unwrap_or("");
        if path == "/admin" || path.starts_with("/admin/") {
            return self.handle_admin(&req).await;
        }

        let digest = request_digest(&req.method, &req.target, &req.body);
        let decision = self
            .guard
            .record_and_check(&client_id(client.peer.ip()), digest, Instant::now());
        if let GuardDecision::Blocked { reason, retry_after } = decision {
            self.counters.guard_blocks.fetch_add(1, Ordering::Relaxed);
            let secs = retry_after.as_secs() + u64::from(retry_after.subsec_nanos() > 0);
            return json_response(429, json!({"status": "rate_limited", "reason": reason.as_str()}))
                .with_header("Retry-After", &secs.max(1).to_string());
        }

        let Some((device_id, device_target)) = split_device_target(&req.target) else {
            return json_response(404, json!({"status": "not_found"}));
        };
        let Some(device) = self.devices.get(device_id) else {
            return json_response(404, json!({"status": "unknown_device", "device": device_id}));
        };
        if device.health() == Health::Down {
            return outage(503, "device_unavailable", device.id()).with_header(DEVICE_HEADER, device.id());
        }

        let cacheable = self.cache_config.enabled
            && match req.method.as_str() {
                "GET" => true,
                "POST" => parse_json_body(&req.body).is_some(),
                _ => false,
            };
        if !cacheable {
            self.counters.uncacheable.fetch_add(1, Ordering::Relaxed);
            return self
                .forward_and_decode(&device, client.listener_family, &req, &device_target)
                .await
                .with_header(CACHE_HEADER, "miss");
        }

        let key = CacheKey::new(device.id(), &req.method, &device_target, &req.body);
        let no_cache = wants_no_cache(&req);
        if !no_cache {
            if let Some(hit) = self.cache.get(&key, Instant::now()) {
                return self.hit_response(&device, hit);
            }
        }
        loop {
            match self.join_flight(&key, no_cache) {
                Joined::Hit(entry) => return self.hit_response(&device, entry),
                Joined::Follower(mut rx) => {
                    let shared = match rx.wait_for(Option::is_some).await {
                        Ok(v) => v.clone().expect("waited for Some"),
                        // leader was cancelled; try again
                        Err(_) => continue,
                    };
                    let mut resp = (*shared).clone();
                    if resp.is_success() {
                        self.counters.coalesced.fetch_add(1, Ordering::Relaxed);
                        self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                        resp.set_header(CACHE_HEADER, "hit");
                    } else {
                        resp.set_header(CACHE_HEADER, "miss");
                    }
                    return resp;
                }
                Joined::Leader(tx) => {
                    let flight = FlightGuard {
                        map: &self.inflight,
                        key: &key,
                    };
                    self.counters.cache_misses.fetch_add(1, Ordering::Relaxed);
                    let resp = self
                        .forward_and_decode(&device, client.listener_family, &req, &device_target)
                        .await;
                    if resp.is_success() {
                        let ttl = device.record.ttl.unwrap_or_else(|| self.cache_config.default_ttl());
                        let headers = resp
                            .header("content-type")
                            .map(|ct| vec![("Content-Type".to_owned(), ct.to_owned())])
                            .unwrap_or_default();
                        let entry = CacheEntry::new(resp.status, headers, resp.body.clone(), Instant::now(), ttl);
                        if let PutOutcome::Stored { evicted } = self.cache.put(key.clone(), entry) {
                            if evicted > 0 {
                                debug!(evicted, "cache evicted entries");
                            }
                        }
                    }
                    drop(flight);
                    let resp = resp.with_header(CACHE_HEADER, "miss");
                    let _ = tx.send(Some(Arc::new(resp.clone())));
                    return resp;
                }
            }
        }
    }

    fn join_flight(&self, key: &CacheKey, no_cache: bool) -> Joined {
        let mut map = self.inflight.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(rx) = map.get(key) {
            return Joined::Follower(rx.clone());
        }
        // A leader stores before leaving the map, so this re-check under
        // the lock cannot miss a response that just landed.
        if !no_cache {
            if let Some(hit) = self.cache.get(key, Instant::now()) {
                return Joined::Hit(hit);
            }
        }
        let (tx, rx) = watch::channel(None);
        map.insert(key.clone(), rx);
        Joined::Leader(tx)
    }

    fn hit_response(&self, device: &Device, entry: CacheEntry) -> Response {
        self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
        let mut resp = Response::new(entry.status).with_body(entry.body);
        resp.headers = entry.headers;
        resp.with_header(CACHE_HEADER, "hit")
            .with_header(DEVICE_HEADER, device.id())
    }

    /// Codes the request, forwards it and decodes the reply into the
    /// client-facing response. Failures become outage responses.
    async fn forward_and_decode(&self, device: &Device, leg: Family, req: &Request, device_target: &str) -> Response {
        let mapping = &device.record.mapping;
        let mut body = req.body.clone();
        let mut is_json = false;
        if let Some(doc) = parse_json_body(&req.body) {
            match mapping.encode_keys(&doc) {
                Ok(coded) => {
                    body = minified(&coded).into_bytes();
                    is_json = true;
                }
                Err(e) => {
                    return json_response(
                        400,
                        json!({"status": "codec_collision", "device": device.id(), "key": e.key, "path": e.path}),
                    )
                    .with_header(DEVICE_HEADER, device.id());
                }
            }
        }
        let mut coded = Request::new(&req.method, device_target)
            .with_header("Host", &device.record.endpoint.to_string())
            .with_header("Connection", "close");
        if !body.is_empty() {
            let ct = if is_json {
                "application/json"
            } else {
                req.header("content-type").unwrap_or("application/octet-stream")
            };
            coded = coded.with_header("Content-Type", ct);
        }
        coded.body = body;

        let exchange = match self.forward_to_device(device, Some(leg), &coded).await {
            Ok(x) => x,
            Err(e) => return self.device_failed(device, e),
        };
        device.record_success(exchange.family, None);
        let DeviceExchange { response, .. } = exchange;
        let mut out = Response::new(response.status);
        if let Some(ct) = response.header("content-type") {
            out = out.with_header("Content-Type", ct);
        }
        out.body = match parse_json_body(&response.body) {
            Some(doc) => minified(&mapping.decode_keys(&doc)).into_bytes(),
            None => response.body,
        };
        out.with_header(DEVICE_HEADER, device.id())
    }

    fn device_failed(&self, device: &Device, err: ForwardError) -> Response {
        self.counters.device_failures.fetch_add(1, Ordering::Relaxed);
        warn!(device = %device.id(), error = %err, "device request failed");
        let resp = match &err {
            ForwardError::Protocol(_) => {
                return outage(502, "device_protocol_error", device.id()).with_header(DEVICE_HEADER, device.id())
            }
            ForwardError::Timeout => outage(504, "device_timeout", device.id()),
            ForwardError::Connect(_) | ForwardError::Io(_) => outage(503, "device_unavailable", device.id()),
        };
        if device.record_failure(self.settings.failure_threshold, None) == Transition::WentDown {
            self.mark_down(device);
        }
        resp.with_header(DEVICE_HEADER, device.id())
    }

    fn mark_down(&self, device: &Device) {
        let n = self.cache.invalidate_device(device.id());
        warn!(device = %device.id(), invalidated = n, "device marked down");
    }

    async fn candidates(&self, device: &Device) -> io::Result<Vec<SocketAddr>> {
        let endpoint = &device.record.endpoint;
        match &endpoint.host {
            Host::Ip(ip) => Ok(vec![SocketAddr::new(*ip, endpoint.port)]),
            Host::Name(name) => {
                let req = ConnectRequest {
                    addr: TargetAddr::Domain(name.clone()),
                    port: endpoint.port,
                };
                self.resolver
                    .resolve(&req)
                    .await
                    .map_err(|e| io::Error::new(io::ErrorKind::HostUnreachable, e))
            }
        }
    }

    /// Opens a connection to the device. With a `leg` family, same-family
    /// candidates are dialled directly and other-family candidates through
    /// the relay; without a relay only `leg` may be used. Without a `leg`
    /// (health probes) the gateway dials on the candidate's own family.
    async fn open_device_stream(&self, device: &Device, leg: Option<Family>) -> io::Result<(TcpStream, Route, Family)> {
        let mut last = io::Error::new(io::ErrorKind::HostUnreachable, "no candidate address");
        for cand in self.candidates(device).await? {
            let family = Family::of_addr(&cand);
            let attempt = match leg {
                None => TcpStream::connect(cand).await.map(|s| (s, Route::Direct)),
                Some(leg) if leg == family => TcpStream::connect(cand).await.map(|s| (s, Route::Direct)),
                Some(leg) => match self.relay.as_ref().and_then(|r| r.proxy_for(leg)) {
                    Some(proxy) => {
                        let target = ConnectRequest {
                            addr: TargetAddr::Ip(cand.ip()),
                            port: cand.port(),
                        };
                        connect_through(proxy, &target).await.map(|s| (s, Route::Relayed))
                    }
                    None => crate::net::connect_single_family(leg, cand)
                        .await
                        .map(|s| (s, Route::Direct)),
                },
            };
            match attempt {
                Ok((stream, route)) => {
                    let _ = stream.set_nodelay(true);
                    return Ok((stream, route, family));
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    /// Sends an already-coded request to the device and reads its reply,
    /// within the configured request timeout.
    pub async fn forward_to_device(
        &self,
        device: &Device,
        leg: Option<Family>,
        coded: &Request,
    ) -> Result<DeviceExchange, ForwardError> {
        let timeout = self.settings.request_timeout();
        let work = async {
            let (stream, route, family) = self
                .open_device_stream(device, leg)
                .await
                .map_err(ForwardError::Connect)?;
            self.counters.device_requests.fetch_add(1, Ordering::Relaxed);
            match route {
                Route::Direct => self.counters.direct_forwards.fetch_add(1, Ordering::Relaxed),
                Route::Relayed => self.counters.relayed_forwards.fetch_add(1, Ordering::Relaxed),
            };
            let mut conn = Conn::new(stream);
            let sent = conn.send_request(coded).await;
            self.counters
                .device_leg_bytes_out
                .fetch_add(conn.bytes_written, Ordering::Relaxed);
            sent.map_err(|e| match e {
                HttpError::Io(e) => ForwardError::Io(e),
                other => ForwardError::Protocol(other),
            })?;
            let read = conn.read_response().await;
            self.counters
                .device_leg_bytes_in
                .fetch_add(conn.bytes_read, Ordering::Relaxed);
            let response = match read {
                Ok(Some(r)) => r,
                Ok(None) | Err(HttpError::UnexpectedEof) => {
                    return Err(ForwardError::Io(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "device closed the connection",
                    )))
                }
                Err(HttpError::Io(e)) => return Err(ForwardError::Io(e)),
                Err(other) => return Err(ForwardError::Protocol(other)),
            };
            Ok(DeviceExchange {
                response,
                route,
                family,
                bytes_out: conn.bytes_written,
                bytes_in: conn.bytes_read,
            })
        };
        match tokio::time::timeout(timeout, work).await {
            Ok(r) => r,
            Err(_) => Err(ForwardError::Timeout),
        }
    }

    /// Issues the device's health request and applies the health rules.
    pub async fn probe_device(&self, device_id: &str) -> Option<Health> {
        let device = self.devices.get(device_id)?;
        let req = Request::new("GET", &device.record.health_path)
            .with_header("Host", &device.record.endpoint.to_string())
            .with_header("Connection", "close");
        let now = Instant::now();
        let ok = match self.forward_to_device(&device, None, &req).await {
            Ok(x) if x.response.is_success() => Some(x.family),
            Ok(x) => {
                debug!(device = %device_id, status = x.response.status, "probe got error status");
                None
            }
            Err(e) => {
                debug!(device = %device_id, error = %e, "probe failed");
                None
            }
        };
        match ok {
            Some(family) => {
                if device.record_success(family, Some(now)) == Transition::WentUp {
                    info!(device = %device_id, "device up");
                }
            }
            None => {
                if device.record_failure(self.settings.failure_threshold, Some(now)) == Transition::WentDown {
                    self.mark_down(&device);
                }
            }
        }
        Some(device.health())
    }

    pub async fn probe_all(&self) {
        let ids: Vec<String> = self.devices.list().iter().map(|d| d.id().to_owned()).collect();
        let probes = ids.iter().map(|id| self.probe_device(id));
        futures_join_all(probes).await;
    }

    async fn handle_admin(&self, req: &Request) -> Response {
        let path = req.target.split('?').next().unwrap_or("");
        let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();
        match (req.method.as_str(), segments.as_slice()) {
            ("GET", ["admin", "stats"]) => {
                json_response(200, serde_json::to_value(self.stats()).expect("stats serialize"))
            }
            ("GET", ["admin", "devices"]) => {
                let list: Vec<Value> = self.devices.list().iter().map(|d| device_json(d)).collect();
                json_response(200, Value::Array(list))
            }
            ("PUT", ["admin", "devices", id]) => self.admin_register(id, &req.body),
            ("POST", ["admin", "devices", id, "probe"]) => match self.probe_device(id).await {
                Some(h) => json_response(200, json!({"device": id, "health": h})),
                None => json_response(404, json!({"status": "unknown_device", "device": id})),
            },
            _ => json_response(404, json!({"status": "not_found"})),
        }
    }

    fn admin_register(&self, id: &str, body: &[u8]) -> Response {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Registration {
            endpoint: String,
            #[serde(default)]
            mapping: Option<MappingSpec>,
            #[serde(default)]
            ttl_seconds: Option<f64>,
            #[serde(default)]
            health_path: Option<String>,
            #[serde(default)]
            replace: bool,
        }
        let reg: Registration = match serde_json::from_slice(body) {
            Ok(r) => r,
            Err(e) => return json_response(400, json!({"status": "bad_registration", "error": e.to_string()})),
        };
        let spec = DeviceSpec {
            id: id.to_owned(),
            endpoint: reg.endpoint,
            mapping: reg.mapping,
            ttl_seconds: reg.ttl_seconds,
            health_path: reg.health_path,
        };
        let record = match DeviceRecord::from_spec(&spec, self.base_dir.as_deref()) {
            Ok(r) => r,
            Err(e) => return json_response(400, json!({"status": "bad_registration", "error": e.to_string()})),
        };
        match self.register_device(record, reg.replace) {
            Ok(replaced) => json_response(201, json!({"status": "registered", "device": id, "replaced": replaced})),
            Err(e) => json_response(
                409,
                json!({"status": "duplicate_device", "device": id, "error": e.to_string()}),
            ),
        }
    }
}

fn device_json(d: &Device) -> Value {
    let s = d.status();
    json!({
        "id": d.id(),
        "endpoint": d.record.endpoint.to_string(),
        "family": s.family,
        "health": s.health,
        "consecutive_failures": s.consecutive_failures,
        "last_probe_ms_ago": s.last_probe.map(|t| t.elapsed().as_millis() as u64),
        "mapping_entries": d.record.mapping.len(),
        "ttl_seconds": d.record.ttl.map(|t| t.as_secs_f64()),
        "health_path": d.record.health_path,
    })
}

enum Joined {
    Hit(CacheEntry),
    Follower(Flight),
    Leader(watch::Sender<Option<Arc<Response>>>),
}

/// Removes an in-flight marker when the leader finishes or is cancelled.
struct FlightGuard<'a> {
    map: &'a Mutex<HashMap<CacheKey, Flight>>,
    key: &'a CacheKey,
}

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        self.map.lock().unwrap_or_else(|e| e.into_inner()).remove(self.key);
    }
}

async fn futures_join_all<F: std::future::Future>(futs: impl IntoIterator<Item = F>) -> Vec<F::Output> {
    let mut set = Vec::new();
    for f in futs {
        set.push(Box::pin(f));
    }
    let mut out = Vec::with_capacity(set.len());
    for f in set {
        out.push(f.await);
    }
    out
}

/// Retry hint in whole seconds, rounded up.
pub fn retry_after_secs(d: Duration) -> u64 {
    (d.as_secs() + u64::from(d.subsec_nanos() > 0)).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn device_target_split() {
        assert_eq!(split_device_target("/devices/p1/power"), Some(("p1", "/power".into())));
        assert_eq!(
            split_device_target("/devices/p1/a/b?x=1"),
            Some(("p1", "/a/b?x=1".into()))
        );
        assert_eq!(split_device_target("/devices/p1"), Some(("p1", "/".into())));
        assert_eq!(split_device_target("/devices/p1?q"), Some(("p1", "/?q".into())));
        assert_eq!(split_device_target("/devices/"), None);
        assert_eq!(split_device_target("/other"), None);
    }

    #[test]
    fn retry_after_rounds_up() {
        assert_eq!(retry_after_secs(Duration::from_millis(1500)), 2);
        assert_eq!(retry_after_secs(Duration::from_secs(60)), 60);
        assert_eq!(retry_after_secs(Duration::ZERO), 1);
    }

    #[test]
    fn no_cache_detection() {
        assert!(wants_no_cache(
            &Request::new("GET", "/").with_header("Cache-Control", "max-age=0, no-cache")
        ));
        assert!(wants_no_cache(
            &Request::new("GET", "/").with_header("Pragma", "no-cache")
        ));
        assert!(!wants_no_cache(&Request::new("GET", "/")));
    }
}
