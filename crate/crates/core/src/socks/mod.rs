//! SOCKS5-based IPv4/IPv6 gatewaying.
//!
//! A client connects on one address family and asks for a target; the
//! relay resolves the target, connects on whichever family the target
//! actually has, and copies bytes between the two terminated connections.
//! Only the no-authentication method and the CONNECT command are offered.

mod relay;
mod resolver;
pub mod wire;

use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use relay::{
    connect_through, establish_and_pump, serve_connection, splice, BindError, PumpSettings, RegistryStats, RelayServer,
    RelayState, RelaySummary, Session, SessionRegistry, SessionSnapshot,
};
pub use resolver::{parse_family, ResolveError, ResolverPolicy, ResolverSource, StaticTable, TableError};
pub use wire::{ConnectRequest, Family, MethodSelection, ReplyCode, SocksError, TargetAddr};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocksConfig {
    pub enabled: bool,
    pub listen_v4: Option<SocketAddr>,
    pub listen_v6: Option<SocketAddr>,
    /// `system` or `static:<path>`.
    pub resolver: String,
    pub prefer: Vec<Family>,
    pub buffer_size: usize,
    pub idle_timeout_seconds: f64,
    pub connect_timeout_ms: u64,
}

impl Default for SocksConfig {
    fn default() -> Self {
        SocksConfig {
            enabled: true,
            listen_v4: Some(SocketAddr::from(([127, 0, 0, 1], 1080))),
            listen_v6: Some("[::1]:1080".parse().expect("literal")),
            resolver: "system".into(),
            prefer: vec![Family::V6, Family::V4],
            buffer_size: 16 * 1024,
            idle_timeout_seconds: 300.0,
            connect_timeout_ms: 2000,
        }
    }
}

impl SocksConfig {
    pub fn pump_settings(&self) -> PumpSettings {
        PumpSettings {
            buffer_size: self.buffer_size,
            idle_timeout: Duration::from_secs_f64(self.idle_timeout_seconds),
            connect_timeout: Duration::from_millis(self.connect_timeout_ms),
        }
    }

    /// Builds the resolver policy; relative static table paths are taken
    /// from `base`.
    pub fn resolver_policy(&self, base: Option<&Path>) -> Result<ResolverPolicy, TableError> {
        let mut policy = ResolverPolicy::from_setting(&self.resolver, base)?;
        policy.preference = self.prefer.clone();
        Ok(policy)
    }
}
