//! SOCKS5 message layouts (no-auth CONNECT subset).

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use thiserror::Error;

pub const VERSION: u8 = 0x05;
pub const METHOD_NO_AUTH: u8 = 0x00;
pub const METHOD_NONE_ACCEPTABLE: u8 = 0xFF;

pub const CMD_CONNECT: u8 = 0x01;
pub const CMD_BIND: u8 = 0x02;
pub const CMD_UDP_ASSOCIATE: u8 = 0x03;

pub const ATYP_IPV4: u8 = 0x01;
pub const ATYP_DOMAIN: u8 = 0x03;
pub const ATYP_IPV6: u8 = 0x04;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ReplyCode {
    Succeeded = 0x00,
    GeneralFailure = 0x01,
    NotAllowed = 0x02,
    NetworkUnreachable = 0x03,
    HostUnreachable = 0x04,
    ConnectionRefused = 0x05,
    TtlExpired = 0x06,
    CommandNotSupported = 0x07,
    AddressTypeNotSupported = 0x08,
}

impl ReplyCode {
    pub fn from_u8(b: u8) -> Option<Self> {
        use ReplyCode::*;
        Some(match b {
            0x00 => Succeeded,
            0x01 => GeneralFailure,
            0x02 => NotAllowed,
            0x03 => NetworkUnreachable,
            0x04 => HostUnreachable,
            0x05 => ConnectionRefused,
            0x06 => TtlExpired,
            0x07 => CommandNotSupported,
            0x08 => AddressTypeNotSupported,
            _ => return None,
        })
    }

    /// Maps a failed outbound connect onto the closest reply code.
    pub fn from_io_error(err: &std::io::Error) -> Self {
        use std::io::ErrorKind::*;
        match err.kind() {
            ConnectionRefused => ReplyCode::ConnectionRefused,
            TimedOut => ReplyCode::TtlExpired,
            NetworkUnreachable => ReplyCode::NetworkUnreachable,
            HostUnreachable | AddrNotAvailable => ReplyCode::HostUnreachable,
            _ => ReplyCode::GeneralFailure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    V4,
    V6,
}

impl Family {
    pub fn of(ip: &IpAddr) -> Self {
        match ip {
            IpAddr::V4(_) => Family::V4,
            IpAddr::V6(_) => Family::V6,
        }
    }

    pub fn of_addr(addr: &SocketAddr) -> Self {
        Self::of(&addr.ip())
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::V4 => "v4",
            Family::V6 => "v6",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetAddr {
    Ip(IpAddr),
    Domain(String),
}

impl fmt::Display for TargetAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetAddr::Ip(ip) => ip.fmt(f),
            TargetAddr::Domain(d) => f.write_str(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectRequest {
    pub addr: TargetAddr,
    pub port: u16,
}

impl ConnectRequest {
    /// Client-side encoding of a CONNECT request.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![VERSION, CMD_CONNECT, 0x00];
        push_addr(&mut out, &self.addr);
        out.extend_from_slice(&self.port.to_be_bytes());
        out
    }
}

fn push_addr(out: &mut Vec<u8>, addr: &TargetAddr) {
    match addr {
        TargetAddr::Ip(IpAddr::V4(v4)) => {
            out.push(ATYP_IPV4);
            out.extend_from_slice(&v4.octets());
        }
        TargetAddr::Ip(IpAddr::V6(v6)) => {
            out.push(ATYP_IPV6);
            out.extend_from_slice(&v6.octets());
        }
        TargetAddr::Domain(name) => {
            out.push(ATYP_DOMAIN);
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SocksError {
    #[error("need more bytes")]
    Incomplete,
    #[error("unsupported SOCKS version {0:#04x}")]
    BadVersion(u8),
    #[error("malformed message: {0}")]
    Malformed(&'static str),
    /// A well-formed request the relay refuses; `code` is the reply to send.
    #[error("request rejected with reply {code:?}")]
    Rejected { code: ReplyCode },
}

impl SocksError {
    pub fn reply_code(&self) -> Option<ReplyCode> {
        match self {
            SocksError::Rejected { code } => Some(*code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSelection {
    NoAuth,
    NoAcceptable,
}

impl MethodSelection {
    pub fn reply(&self) -> [u8; 2] {
        match self {
            MethodSelection::NoAuth => [VERSION, METHOD_NO_AUTH],
            MethodSelection::NoAcceptable => [VERSION, METHOD_NONE_ACCEPTABLE],
        }
    }
}

/// Length of a complete greeting at the head of `bytes`.
pub fn greeting_len(bytes: &[u8]) -> Result<usize, SocksError> {
    match bytes {
        [] | [_] => Err(SocksError::Incomplete),
        [v, ..] if *v != VERSION => Err(SocksError::BadVersion(*v)),
        [_, n, ..] => Ok(2 + *n as usize),
    }
}

/// Decodes the version/method-selection greeting.
pub fn negotiate(greeting: &[u8]) -> Result<MethodSelection, SocksError> {
    let len = greeting_len(greeting)?;
    if len == 2 {
        return Err(SocksError::Malformed("greeting offers no methods"));
    }
    let methods = greeting.get(2..len).ok_or(SocksError::Incomplete)?;
    if len != greeting.len() {
        return Err(SocksError::Malformed("trailing bytes after greeting"));
    }
    Ok(if methods.contains(&METHOD_NO_AUTH) {
        MethodSelection::NoAuth
    } else {
        MethodSelection::NoAcceptable
    })
}

/// How many bytes the request at the head of `bytes` occupies, once
/// enough of it is present to tell. Unknown address types are reported as
/// a rejection since their length cannot be known.
pub fn request_len(bytes: &[u8]) -> Result<usize, SocksError> {
    if bytes.len() < 4 {
        if let Some(&v) = bytes.first() {
            if v != VERSION {
                return Err(SocksError::BadVersion(v));
            }
        }
        return Err(SocksError::Incomplete);
    }
    if bytes[0] != VERSION {
        return Err(SocksError::BadVersion(bytes[0]));
    }
    match bytes[3] {
        ATYP_IPV4 => Ok(4 + 4 + 2),
        ATYP_IPV6 => Ok(4 + 16 + 2),
        ATYP_DOMAIN => match bytes.get(4) {
            Some(&n) => Ok(4 + 1 + n as usize + 2),
            None => Err(SocksError::Incomplete),
        },
        _ => Err(SocksError::Rejected {
            code: ReplyCode::AddressTypeNotSupported,
        }),
    }
}

/// Decodes a CONNECT request. BIND and UDP ASSOCIATE (and any unknown
/// command) are rejected with "command not supported".
pub fn parse_connect(bytes: &[u8]) -> Result<ConnectRequest, SocksError> {
    let len = request_len(bytes)?;
    if bytes.len() < len {
        return Err(SocksError::Incomplete);
    }
    if bytes.len() > len {
        return Err(SocksError::Malformed("trailing bytes after request"));
    }
    if bytes[1] != CMD_CONNECT {
        return Err(SocksError::Rejected {
            code: ReplyCode::CommandNotSupported,
        });
    }
    if bytes[2] != 0x00 {
        return Err(SocksError::Malformed("reserved byte must be zero"));
    }
    let (addr, rest) = match bytes[3] {
        ATYP_IPV4 => {
            let o: [u8; 4] = bytes[4..8].try_into().expect("length checked");
            (TargetAddr::Ip(IpAddr::V4(Ipv4Addr::from(o))), &bytes[8..])
        }
        ATYP_IPV6 => {
            let o: [u8; 16] = bytes[4..20].try_into().expect("length checked");
            (TargetAddr::Ip(IpAddr::V6(Ipv6Addr::from(o))), &bytes[20..])
        }
        _ => {
            let n = bytes[4] as usize;
            if n == 0 {
                return Err(SocksError::Malformed("empty domain name"));
            }
            let name =
                std::str::from_utf8(&bytes[5..5 + n]).map_err(|_| SocksError::Malformed("domain name is not UTF-8"))?;
            (TargetAddr::Domain(name.to_owned()), &bytes[5 + n..])
        }
    };
    let port = u16::from_be_bytes([rest[0], rest[1]]);
    if port == 0 {
        return Err(SocksError::Rejected {
            code: ReplyCode::GeneralFailure,
        });
    }
    Ok(ConnectRequest { addr, port })
}

/// Encodes a reply. Failure replies carry an all-zero IPv4 bound address.
pub fn encode_reply(code: ReplyCode, bound: Option<SocketAddr>) -> Vec<u8> {
    let mut out = vec![VERSION, code as u8, 0x00];
    let bound = bound.unwrap_or_else(|| SocketAddr::new(IpAddr::V4(Ipv4Addr::UNSPECIFIED), 0));
    push_addr(&mut out, &TargetAddr::Ip(bound.ip()));
    out.extend_from_slice(&bound.port().to_be_bytes());
    out
}

/// Decodes a reply header into its code and bound address (client side).
pub fn parse_reply(bytes: &[u8]) -> Result<(ReplyCode, Option<SocketAddr>), SocksError> {
    let len = request_len(bytes).map_err(|e| match e {
        SocksError::Rejected { .. } => SocksError::Malformed("unknown address type in reply"),
        other => other,
    })?;
    if bytes.len() < len {
        return Err(SocksError::Incomplete);
    }
    let code = ReplyCode::from_u8(bytes[1]).ok_or(SocksError::Malformed("unknown reply code"))?;
    let port = u16::from_be_bytes([bytes[len - 2], bytes[len - 1]]);
    let bound = match bytes[3] {
        ATYP_IPV4 => Some(IpAddr::V4(Ipv4Addr::from(<[u8; 4]>::try_from(&bytes[4..8]).unwrap()))),
        ATYP_IPV6 => Some(IpAddr::V6(Ipv6Addr::from(<[u8; 16]>::try_from(&bytes[4..20]).unwrap()))),
        _ => None,
    };
    Ok((code, bound.map(|ip| SocketAddr::new(ip, port))))
}
