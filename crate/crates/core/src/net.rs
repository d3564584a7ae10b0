//! Socket helpers that pin a socket to a single address family.

use std::io;
use std::net::SocketAddr;

use socket2::{Domain, Protocol, SockAddr, Socket, Type};
use tokio::net::{TcpListener, TcpStream};

use crate::socks::Family;

/// Binds a listener; IPv6 listeners are IPv6-only so that each listener
/// serves exactly one family.
pub fn bind_listener(addr: SocketAddr) -> io::Result<TcpListener> {
    let socket = Socket::new(Domain::for_address(addr), Type::STREAM, Some(Protocol::TCP))?;
    if addr.is_ipv6() {
        socket.set_only_v6(true)?;
    }
    socket.set_reuse_address(true)?;
    socket.set_nonblocking(true)?;
    socket.bind(&SockAddr::from(addr))?;
    socket.listen(1024)?;
    TcpListener::from_std(socket.into())
}

/// Connects using only `family`. An IPv6-only socket cannot reach an IPv4
/// peer (even through the v4-mapped form) and an IPv4 socket cannot reach
/// an IPv6 peer; both cases fail like any other connect error.
pub async fn connect_single_family(family: Family, peer: SocketAddr) -> io::Result<TcpStream> {
    let target = match (family, peer) {
        (Family::V4, SocketAddr::V4(_)) | (Family::V6, SocketAddr::V6(_)) => peer,
        (Family::V6, SocketAddr::V4(v4)) => SocketAddr::new(v4.ip().to_ipv6_mapped().into(), v4.port()),
        (Family::V4, SocketAddr::V6(_)) => {
            return Err(io::Error::new(
                io::ErrorKind::AddrNotAvailable,
                format!("no IPv4 route to IPv6 peer {peer}"),
            ))
        }
    };
    let domain = match family {
        Family::V4 => Domain::IPV4,
        Family::V6 => Domain::IPV6,
    };
    let socket = Socket::new(domain, Type::STREAM, Some(Protocol::TCP))?;
    if family == Family::V6 {
        socket.set_only_v6(true)?;
    }
    socket.set_nonblocking(true)?;
    match socket.connect(&SockAddr::from(target)) {
        Ok(()) => {}
        Err(e) if e.raw_os_error() == Some(libc_einprogress()) || e.kind() == io::ErrorKind::WouldBlock => {}
        Err(e) => return Err(e),
    }
    let stream = TcpStream::from_std(socket.into())?;
    stream.writable().await?;
    if let Some(e) = stream.take_error()? {
        return Err(e);
    }
    Ok(stream)
}

const fn libc_einprogress() -> i32 {
    // EINPROGRESS on Linux and the BSDs
    if cfg!(target_os = "linux") {
        115
    } else {
        36
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn v6_only_connector_cannot_reach_v4_listener() {
        let listener = bind_listener("127.0.0.1:0".parse().unwrap()).unwrap();
        let addr = listener.local_addr().unwrap();
        assert!(connect_single_family(Family::V4, addr).await.is_ok());
        assert!(connect_single_family(Family::V6, addr).await.is_err());
    }

    #[tokio::test]
    async fn v6_listener_is_v6_only() {
        let listener = bind_listener("[::1]:0".parse().unwrap()).unwrap();
        let addr = listener.local_addr().unwrap();
        assert!(connect_single_family(Family::V6, addr).await.is_ok());
        assert!(connect_single_family(Family::V4, addr).await.is_err());
        let v4 = SocketAddr::from(([127, 0, 0, 1], addr.port()));
        assert!(TcpStream::connect(v4).await.is_err());
    }
}
