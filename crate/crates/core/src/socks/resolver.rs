use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::path::Path;

use thiserror::Error;

use super::wire::{ConnectRequest, Family, ReplyCode, TargetAddr};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("static resolver table line {line}: {why}")]
    Line { line: usize, why: String },
    #[error("reading static resolver table {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Name table for hermetic resolution. Lines are `name family address`,
/// with family `v4`/`ipv4`/`4` or `v6`/`ipv6`/`6`; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StaticTable {
    names: HashMap<String, Vec<IpAddr>>,
}

impl StaticTable {
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let mut table = StaticTable::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: String| TableError::Line { line: idx + 1, why };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, family, addr] = fields[..] else {
                return Err(bad(format!("expected 3 fields, found {}", fields.len())));
            };
            let family = parse_family(family).ok_or_else(|| bad(format!("unknown family {family:?}")))?;
            let ip: IpAddr = addr.parse().map_err(|_| bad(format!("bad address {addr:?}")))?;
            if Family::of(&ip) != family {
                return Err(bad(format!("{addr} is not an {family} address")));
            }
            table.insert(name, ip);
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TableError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TableError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn insert(&mut self, name: &str, ip: IpAddr) {
        self.names.entry(name.to_ascii_lowercase()).or_default().push(ip);
    }

    pub fn lookup(&self, name: &str) -> &[IpAddr] {
        self.names
            .get(&name.to_ascii_lowercase())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

pub fn parse_family(s: &str) -> Option<Family> {
    match s.to_ascii_lowercase().as_str() {
        "v4" | "ipv4" | "4" | "inet" => Some(Family::V4),
        "v6" | "ipv6" | "6" | "inet6" => Some(Family::V6),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResolverSource {
    System,
    Static(StaticTable),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolverPolicy {
    pub source: ResolverSource,
    /// Family order for names that resolve to both families.
    pub preference: Vec<Family>,
}

impl Default for ResolverPolicy {
    fn default() -> Self {
        ResolverPolicy {
            source: ResolverSource::System,
            preference: vec![Family::V6, Family::V4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot resolve {name:?}")]
pub struct ResolveError {
    pub name: String,
}

impl ResolveError {
    pub fn reply_code(&self) -> ReplyCode {
        ReplyCode::HostUnreachable
    }
}

impl ResolverPolicy {
    pub fn with_static(table: StaticTable) -> Self {
        ResolverPolicy {
            source: ResolverSource::Static(table),
            ..Default::default()
        }
    }

    /// Parses the `socks.resolver` setting: `system` or `static:<path>`.
    pub fn from_setting(setting: &str, base: Option<&Path>) -> Result<Self, TableError> {
        match setting.strip_prefix("static:") {
            Some(path) => {
                let path = match base {
                    Some(dir) if Path::new(path).is_relative() => dir.join(path),
                    _ => Path::new(path).to_path_buf(),
                };
                Ok(Self::with_static(StaticTable::load(path)?))
            }
            None if setting == "system" => Ok(Self::default()),
            None => Err(TableError::Line {
                line: 0,
                why: format!("resolver must be \"system\" or \"static:<path>\", got {setting:?}"),
            }),
        }
    }

    fn rank(&self, family: Family) -> usize {
        self.preference
            .iter()
            .position(|f| *f == family)
            .unwrap_or(self.preference.len())
    }

    /// Candidate addresses for a request: a literal yields itself, a name
    /// yields every resolved address ordered by family preference (stable
    /// within a family).
    pub async fn resolve(&self, req: &ConnectRequest) -> Result<Vec<SocketAddr>, ResolveError> {
        let name = match &req.addr {
            TargetAddr::Ip(ip) => return Ok(vec![SocketAddr::new(*ip, req.port)]),
            TargetAddr::Domain(name) => name,
        };
        let mut ips: Vec<IpAddr> = match &self.source {
            ResolverSource::Static(table) => table.lookup(name).to_vec(),
            ResolverSource::System => match tokio::net::lookup_host((name.as_str(), req.port)).await {
                Ok(addrs) => {
                    let mut seen = Vec::new();
                    for a in addrs {
                        if !seen.contains(&a.ip()) {
                            seen.push(a.ip());
                        }
                    }
                    seen
                }
                Err(_) => Vec::new(),
            },
        };
        if ips.is_empty() {
            return Err(ResolveError { name: name.clone() });
        }
        ips.sort_by_key(|ip| self.rank(Family::of(ip)));
        Ok(ips.into_iter().map(|ip| SocketAddr::new(ip, req.port)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain(name: &str, port: u16) -> ConnectRequest {
        ConnectRequest {
            addr: TargetAddr::Domain(name.into()),
            port,
        }
    }

    #[tokio::test]
    async fn literal_passthrough() {
        let req = ConnectRequest {
            addr: TargetAddr::Ip("::1".parse().unwrap()),
            port: 9090,
        };
        let got = ResolverPolicy::default().resolve(&req).await.unwrap();
        assert_eq!(got, vec!["[::1]:9090".parse().unwrap()]);
    }

    #[tokio::test]
    async fn static_lookup_and_preference() {
        let table =
            StaticTable::parse("# test table\nsensor-a v4 127.0.0.1\nboth ipv4 127.0.0.1\nboth ipv6 ::1\n").unwrap();
        let mut policy = ResolverPolicy::with_static(table);
        assert_eq!(
            policy.resolve(&domain("sensor-a", 7)).await.unwrap(),
            vec!["127.0.0.1:7".parse().unwrap()]
        );
        assert_eq!(
            policy.resolve(&domain("both", 7)).await.unwrap(),
            vec!["[::1]:7".parse().unwrap(), "127.0.0.1:7".parse().unwrap()]
        );
        policy.preference = vec![Family::V4, Family::V6];
        assert_eq!(
            policy.resolve(&domain("BOTH", 7)).await.unwrap()[0],
            "127.0.0.1:7".parse().unwrap()
        );
    }

    #[tokio::test]
    async fn unknown_name_is_host_unreachable() {
        let policy = ResolverPolicy::with_static(StaticTable::default());
        let err = policy.resolve(&domain("nowhere", 1)).await.unwrap_err();
        assert_eq!(err.reply_code(), ReplyCode::HostUnreachable);
    }

    #[test]
    fn table_rejects_bad_lines() {
        assert!(StaticTable::parse("x v4").is_err());
        assert!(StaticTable::parse("x v9 127.0.0.1").is_err());
        assert!(StaticTable::parse("x v6 127.0.0.1").is_err());
    }
}
