use std::fmt;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cache::CacheConfig;
use crate::codec::{MappingDictionary, MappingError};
use crate::guard::GuardConfig;
use crate::socks::{Family, ResolverPolicy, SocksConfig, TableError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {why}")]
    Parse { path: String, why: String },
    #[error("device {device:?}: {why}")]
    Device { device: String, why: String },
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Resolver(#[from] TableError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub listen_v4: Option<SocketAddr>,
    pub listen_v6: Option<SocketAddr>,
    pub request_timeout_ms: u64,
    /// Consecutive failures that mark a device down (F).
    pub failure_threshold: u32,
    /// Health probe period; zero disables background probing.
    pub probe_interval_seconds: f64,
    /// Route cross-family device traffic through the SOCKS relay.
    pub relay_enabled: bool,
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            listen_v4: Some(SocketAddr::from(([127, 0, 0, 1], 8080))),
            listen_v6: Some("[::1]:8080".parse().expect("literal")),
            request_timeout_ms: 2000,
            failure_threshold: 3,
            probe_interval_seconds: 10.0,
            relay_enabled: true,
        }
    }
}

impl GatewaySection {
    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }

    pub fn probe_interval(&self) -> Option<Duration> {
        (self.probe_interval_seconds > 0.0).then(|| Duration::from_secs_f64(self.probe_interval_seconds))
    }
}

/// A mapping given either as a file path or inline as `{"long":"short"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MappingSpec {
    Path(String),
    Inline(serde_json::Map<String, Value>),
}

impl MappingSpec {
    pub fn load(&self, device: &str, base: Option<&Path>) -> Result<MappingDictionary, ConfigError> {
        match self {
            MappingSpec::Path(p) => {
                let path = match base {
                    Some(dir) if Path::new(p).is_relative() => dir.join(p),
                    _ => PathBuf::from(p),
                };
                Ok(MappingDictionary::load(path)?)
            }
            MappingSpec::Inline(map) => {
                let mut pairs = Vec::with_capacity(map.len());
                for (k, v) in map {
                    let Value::String(s) = v else {
                        return Err(ConfigError::Device {
                            device: device.to_owned(),
                            why: format!("mapping value for {k:?} must be a string"),
                        });
                    };
                    pairs.push((k.clone(), s.clone()));
                }
                Ok(MappingDictionary::new(device, pairs)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    pub endpoint: String,
    #[serde(default)]
    pub mapping: Option<MappingSpec>,
    #[serde(default)]
    pub ttl_seconds: Option<f64>,
    #[serde(default)]
    pub health_path: Option<String>,
}

/// Whole gateway configuration, readable from JSON or TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub gateway: GatewaySection,
    pub cache: CacheConfig,
    pub dos: GuardConfig,
    pub socks: SocksConfig,
    pub devices: Vec<DeviceSpec>,
}

impl GatewayConfig {
    /// Parses by extension (`.toml`, otherwise JSON).
    pub fn parse(text: &str, path_hint: &Path) -> Result<Self, ConfigError> {
        let path = path_hint.display().to_string();
        let is_toml = path_hint.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(text).map_err(|e| ConfigError::Parse {
                path,
                why: e.to_string(),
            })
        } else {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse {
                path,
                why: e.to_string(),
            })
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Host {
    Ip(IpAddr),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeviceEndpoint {
    pub host: Host,
    pub port: u16,
}

impl DeviceEndpoint {
    pub fn family(&self) -> Option<Family> {
        match &self.host {
            Host::Ip(ip) => Some(Family::of(ip)),
            Host::Name(_) => None,
        }
    }

    pub fn socket_addr(&self) -> Option<SocketAddr> {
        match &self.host {
            Host::Ip(ip) => Some(SocketAddr::new(*ip, self.port)),
            Host::Name(_) => None,
        }
    }
}

impl From<SocketAddr> for DeviceEndpoint {
    fn from(addr: SocketAddr) -> Self {
        DeviceEndpoint {
            host: Host::Ip(addr.ip()),
            port: addr.port(),
        }
    }
}

impl FromStr for DeviceEndpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Ok(addr) = s.parse::<SocketAddr>() {
            return Ok(addr.into());
        }
        let (host, port) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("endpoint {s:?} lacks a port"))?;
        let port: u16 = port.parse().map_err(|_| format!("endpoint {s:?} has a bad port"))?;
        let valid = !host.is_empty()
            && host
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_');
        if !valid || port == 0 {
            return Err(format!("endpoint {s:?} is not host:port"));
        }
        Ok(DeviceEndpoint {
            host: Host::Name(host.to_owned()),
            port,
        })
    }
}

impl fmt::Display for DeviceEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.host {
            Host::Ip(ip) => SocketAddr::new(*ip, self.port).fmt(f),
            Host::Name(n) => write!(f, "{n}:{}", self.port),
        }
    }
}

/// Static description of a registered device.
#[derive(Debug, Clone)]
pub struct DeviceRecord {
    pub device_id: String,
    pub endpoint: DeviceEndpoint,
    pub mapping: Arc<MappingDictionary>,
    pub ttl: Option<Duration>,
    pub health_path: String,
}

impl DeviceRecord {
    pub fn new(device_id: &str, endpoint: DeviceEndpoint, mapping: MappingDictionary) -> Self {
        DeviceRecord {
            device_id: device_id.to_owned(),
            endpoint,
            mapping: Arc::new(mapping),
            ttl: None,
            health_path: "/status".into(),
        }
    }

    pub fn from_spec(spec: &DeviceSpec, base: Option<&Path>) -> Result<Self, ConfigError> {
        let device_err = |why: String| ConfigError::Device {
            device: spec.id.clone(),
            why,
        };
        if !valid_device_id(&spec.id) {
            return Err(device_err("id must be non-empty [A-Za-z0-9._-]".into()));
        }
        let endpoint: DeviceEndpoint = spec.endpoint.parse().map_err(device_err)?;
        let mapping = match &spec.mapping {
            Some(m) => m.load(&spec.id, base)?,
            None => MappingDictionary::empty(&spec.id),
        };
        let ttl = match spec.ttl_seconds {
            Some(t) if !(t.is_finite() && t >= 0.0) => return Err(device_err("ttl_seconds must be >= 0".into())),
            Some(t) => Some(Duration::from_secs_f64(t)),
            None => None,
        };
        let health_path = spec.health_path.clone().unwrap_or_else(|| "/status".into());
        if !health_path.starts_with('/') {
            return Err(device_err("health_path must start with '/'".into()));
        }
        Ok(DeviceRecord {
            device_id: spec.id.clone(),
            endpoint,
            mapping: Arc::new(mapping),
            ttl,
            health_path,
        })
    }
}

pub fn valid_device_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// A configuration with every referenced file loaded and validated.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub raw: GatewayConfig,
    pub base_dir: Option<PathBuf>,
    pub devices: Vec<DeviceRecord>,
    pub resolver: ResolverPolicy,
}

impl ResolvedConfig {
    pub fn resolve(raw: GatewayConfig, base_dir: Option<PathBuf>) -> Result<Self, ConfigError> {
        let base = base_dir.as_deref();
        let devices = raw
            .devices
            .iter()
            .map(|d| DeviceRecord::from_spec(d, base))
            .collect::<Result<Vec<_>, _>>()?;
        let mut seen = std::collections::HashSet::new();
        for d in &devices {
            if !seen.insert(d.device_id.as_str()) {
                return Err(ConfigError::Device {
                    device: d.device_id.clone(),
                    why: "listed twice".into(),
                });
            }
        }
        let resolver = raw.socks.resolver_policy(base)?;
        Ok(ResolvedConfig {
            raw,
            base_dir,
            devices,
            resolver,
        })
    }

    /// Loads and resolves a config file; relative paths inside it are
    /// taken from the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let raw = GatewayConfig::load(path)?;
        Self::resolve(raw, path.parent().map(Path::to_path_buf))
    }
}
