//! In-memory LRU cache of device responses with per-entry TTL.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest as _, Sha256};

/// SHA-256 digest of a request identity.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        f.write_str("…")
    }
}

/// Canonical form of a request body for digesting. JSON bodies are
/// minified with object keys sorted recursively, so whitespace and key
/// order do not matter; other bodies are used verbatim.
pub fn canonical_body(body: &[u8]) -> Vec<u8> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Vec::new();
    }
    match serde_json::from_slice::<Value>(body) {
        Ok(v) => serde_json::to_vec(&sorted(v)).expect("JSON values always serialize"),
        Err(_) => body.to_vec(),
    }
}

fn sorted(v: Value) -> Value {
    match v {
        Value::Object(obj) => {
            let mut pairs: Vec<_> = obj.into_iter().collect();
            pairs.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(pairs.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        leaf => leaf,
    }
}

/// Digest over method, path and canonical body.
pub fn request_digest(method: &str, path: &str, body: &[u8]) -> Digest {
    let mut h = Sha256::new();
    for part in [method.as_bytes(), path.as_bytes()] {
        h.update((part.len() as u64).to_be_bytes());
        h.update(part);
    }
    h.update(canonical_body(body));
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub device_id: String,
    pub method: String,
    pub path: String,
    pub body_digest: Digest,
}

impl CacheKey {
    /// Builds a key from the client-facing (decoded) request.
    pub fn new(device_id: &str, method: &str, path: &str, body: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(canonical_body(body));
        CacheKey {
            device_id: device_id.to_owned(),
            method: method.to_ascii_uppercase(),
            path: path.to_owned(),
            body_digest: Digest(h.finalize().into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    pub stored_at: Instant,
    pub ttl: Duration,
    pub size: usize,
}

impl CacheEntry {
    pub fn new(status: u16, headers: Vec<(String, String)>, body: Vec<u8>, stored_at: Instant, ttl: Duration) -> Self {
        let size = body.len() + headers.iter().map(|(k, v)| k.len() + v.len()).sum::<usize>();
        CacheEntry {
            status,
            headers,
            body,
            stored_at,
            ttl,
            size,
        }
    }

    pub fn is_fresh(&self, now: Instant) -> bool {
        now < self.stored_at + self.ttl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Stored { evicted: usize },
    NotSuccess,
    TooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub enabled: bool,
    pub max_entries: usize,
    pub max_bytes: usize,
    pub default_ttl_seconds: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            enabled: true,
            max_entries: 1024,
            max_bytes: 8 * 1024 * 1024,
            default_ttl_seconds: 5.0,
        }
    }
}

impl CacheConfig {
    pub fn default_ttl(&self) -> Duration {
        Duration::from_secs_f64(self.default_ttl_seconds)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: usize,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

#[derive(Default)]
struct Inner {
    map: HashMap<CacheKey, (CacheEntry, u64)>,
    // recency tick -> key; the smallest tick is least recently used
    order: BTreeMap<u64, CacheKey>,
    tick: u64,
    bytes: usize,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl Inner {
    fn bump(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    fn remove(&mut self, key: &CacheKey) -> Option<CacheEntry> {
        let (entry, tick) = self.map.remove(key)?;
        self.order.remove(&tick);
        self.bytes -= entry.size;
        Some(entry)
    }

    fn evict_lru(&mut self) {
        if let Some((_, key)) = self.order.pop_first() {
            let (entry, _) = self.map.remove(&key).expect("order and map agree");
            self.bytes -= entry.size;
            self.evictions += 1;
        }
    }
}

/// Thread-safe response cache bounded by entry count and total bytes.
pub struct ResponseCache {
    max_entries: usize,
    max_bytes: usize,
    inner: Mutex<Inner>,
}

impl ResponseCache {
    pub fn new(max_entries: usize, max_bytes: usize) -> Self {
        ResponseCache {
            max_entries,
            max_bytes,
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn from_config(config: &CacheConfig) -> Self {
        Self::new(config.max_entries, config.max_bytes)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Returns a fresh entry and marks it most recently used. Expired
    /// entries are dropped and reported as a miss.
    pub fn get(&self, key: &CacheKey, now: Instant) -> Option<CacheEntry> {
        let mut inner = self.lock();
        let fresh = inner.map.get(key).map(|(entry, _)| entry.is_fresh(now));
        match fresh {
            Some(true) => {
                let tick = inner.bump();
                let (entry, old) = inner.map.get_mut(key).expect("checked above");
                let old = std::mem::replace(old, tick);
                let entry = entry.clone();
                inner.order.remove(&old);
                inner.order.insert(tick, key.clone());
                inner.hits += 1;
                Some(entry)
            }
            Some(false) => {
                inner.remove(key);
                inner.misses += 1;
                None
            }
            None => {
                inner.misses += 1;
                None
            }
        }
    }

    /// Stores a 2xx entry, evicting least recently used entries until both
    /// capacities hold. Replaces any existing entry under the same key.
    pub fn put(&self, key: CacheKey, entry: CacheEntry) -> PutOutcome {
        if !(200..300).contains(&entry.status) {
            return PutOutcome::NotSuccess;
        }
        if entry.size > self.max_bytes || self.max_entries == 0 {
            return PutOutcome::TooLarge;
        }
        let mut inner = self.lock();
        inner.remove(&key);
        let mut evicted = 0;
        while inner.map.len() + 1 > self.max_entries || inner.bytes + entry.size > self.max_bytes {
            inner.evict_lru();
            evicted += 1;
        }
        let tick = inner.bump();
        inner.bytes += entry.size;
        inner.order.insert(tick, key.clone());
        inner.map.insert(key, (entry, tick));
        PutOutcome::Stored { evicted }
    }

    /// Removes every entry of a device; returns how many were removed.
    pub fn invalidate_device(&self, device_id: &str) -> usize {
        let mut inner = self.lock();
        let doomed: Vec<CacheKey> = inner.map.keys().filter(|k| k.device_id == device_id).cloned().collect();
        for key in &doomed {
            inner.remove(key);
        }
        doomed.len()
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.lock().map.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.lock().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_bytes(&self) -> usize {
        self.lock().bytes
    }

    pub fn stats(&self) -> CacheStats {
        let inner = self.lock();
        CacheStats {
            entries: inner.map.len(),
            bytes: inner.bytes,
            hits: inner.hits,
            misses: inner.misses,
            evictions: inner.evictions,
        }
    }
}
