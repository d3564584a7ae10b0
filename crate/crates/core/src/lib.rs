//! Web-of-Things gateway building blocks.
//!
//! The gateway sits between web clients and constrained devices. It shrinks
//! JSON payloads on the device leg with a per-device key dictionary, caches
//! device responses, throttles abusive clients and bridges IPv4 clients to
//! IPv6 devices (and back) through a SOCKS5 relay.

pub mod cache;
pub mod codec;
pub mod gateway;
pub mod guard;
pub mod http;
pub mod net;
pub mod sim;
pub mod socks;

pub use cache::{CacheConfig, CacheEntry, CacheKey, ResponseCache};
pub use codec::{minified, CodecError, MappingDictionary, MappingError};
pub use gateway::{ClientContext, Gateway, GatewayConfig, GatewayServer, GatewayStats, ResolvedConfig};
pub use guard::{DosGuard, GuardConfig, GuardDecision};
pub use http::{Conn, HttpError, Request, Response};
pub use sim::{PowerSensorReading, SimConfig, SimHandle};
pub use socks::{Family, RelayServer, SocksConfig};
