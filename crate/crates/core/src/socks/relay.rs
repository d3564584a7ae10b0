//! Relay sessions: accept a SOCKS5 CONNECT, open the outbound connection on
//! whatever family the target has, then splice the two streams.

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use super::resolver::ResolverPolicy;
use super::wire::{self, ConnectRequest, Family, MethodSelection, ReplyCode, SocksError};
use super::SocksConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum RelayState {
    Negotiating = 0,
    Connecting = 1,
    Relaying = 2,
    Closed = 3,
}

impl RelayState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => RelayState::Negotiating,
            1 => RelayState::Connecting,
            2 => RelayState::Relaying,
            _ => RelayState::Closed,
        }
    }
}

#[derive(Debug)]
struct SessionShared {
    id: u64,
    client_addr: SocketAddr,
    target: Mutex<Option<SocketAddr>>,
    bytes_up: AtomicU64,
    bytes_down: AtomicU64,
    state: AtomicU8,
}

impl SessionShared {
    /// Moves the state forward; backward moves are ignored.
    fn advance(&self, to: RelayState) {
        self.state.fetch_max(to as u8, Ordering::AcqRel);
    }

    fn state(&self) -> RelayState {
        RelayState::from_u8(self.state.load(Ordering::Acquire))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionSnapshot {
    pub id: u64,
    pub client_addr: SocketAddr,
    pub client_family: Family,
    pub target: Option<SocketAddr>,
    pub target_family: Option<Family>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub state: RelayState,
}

/// Live and historical session accounting, safe to inspect concurrently.
#[derive(Debug, Default)]
pub struct SessionRegistry {
    next_id: AtomicU64,
    accepted: AtomicU64,
    relayed: AtomicU64,
    cross_family: AtomicU64,
    active: Mutex<HashMap<u64, Arc<SessionShared>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RegistryStats {
    pub accepted: u64,
    /// Sessions that reached the relaying state.
    pub relayed: u64,
    /// Relayed sessions whose two sides use different address families.
    pub cross_family: u64,
    pub active: usize,
}

impl SessionRegistry {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn open(self: &Arc<Self>, client_addr: SocketAddr) -> Session {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        self.accepted.fetch_add(1, Ordering::Relaxed);
        let shared = Arc::new(SessionShared {
            id,
            client_addr,
            target: Mutex::new(None),
            bytes_up: AtomicU64::new(0),
            bytes_down: AtomicU64::new(0),
            state: AtomicU8::new(RelayState::Negotiating as u8),
        });
        self.lock().insert(id, shared.clone());
        Session {
            shared,
            registry: self.clone(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<u64, Arc<SessionShared>>> {
        self.active.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn active_count(&self) -> usize {
        self.lock().len()
    }

    pub fn stats(&self) -> RegistryStats {
        RegistryStats {
            accepted: self.accepted.load(Ordering::Relaxed),
            relayed: self.relayed.load(Ordering::Relaxed),
            cross_family: self.cross_family.load(Ordering::Relaxed),
            active: self.active_count(),
        }
    }

    pub fn snapshot(&self) -> Vec<SessionSnapshot> {
        let mut out: Vec<_> = self.lock().values().map(|s| snapshot_of(s)).collect();
        out.sort_by_key(|s| s.id);
        out
    }
}

fn snapshot_of(s: &SessionShared) -> SessionSnapshot {
    let target = *s.target.lock().unwrap_or_else(|e| e.into_inner());
    SessionSnapshot {
        id: s.id,
        client_addr: s.client_addr,
        client_family: Family::of_addr(&s.client_addr),
        target,
        target_family: target.as_ref().map(Family::of_addr),
        bytes_up: s.bytes_up.load(Ordering::Relaxed),
        bytes_down: s.bytes_down.load(Ordering::Relaxed),
        state: s.state(),
    }
}

/// A registered session; dropping it marks it closed and unregisters it.
pub struct Session {
    shared: Arc<SessionShared>,
    registry: Arc<SessionRegistry>,
}

impl Session {
    pub fn id(&self) -> u64 {
        self.shared.id
    }

    pub fn state(&self) -> RelayState {
        self.shared.state()
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        snapshot_of(&self.shared)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.shared.advance(RelayState::Closed);
        self.registry.lock().remove(&self.shared.id);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelaySummary {
    pub reply: ReplyCode,
    pub client_family: Family,
    pub target: Option<SocketAddr>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct PumpSettings {
    pub buffer_size: usize,
    pub idle_timeout: Duration,
    pub connect_timeout: Duration,
}

impl Default for PumpSettings {
    fn default() -> Self {
        PumpSettings {
            buffer_size: 16 * 1024,
            idle_timeout: Duration::from_secs(300),
            connect_timeout: Duration::from_secs(5),
        }
    }
}

/// Connects to the first reachable candidate, sends the success reply and
/// splices the two streams until both directions end or one side fails.
/// When no candidate is reachable a failure reply is sent instead.
pub async fn establish_and_pump<S>(
    mut client: S,
    candidates: &[SocketAddr],
    session: &Session,
    settings: &PumpSettings,
) -> io::Result<RelaySummary>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let shared = &session.shared;
    shared.advance(RelayState::Connecting);
    let client_family = Family::of_addr(&shared.client_addr);
    let mut last_err = None;
    let mut target = None;
    for cand in candidates {
        match tokio::time::timeout(settings.connect_timeout, TcpStream::connect(cand)).await {
            Ok(Ok(stream)) => {
                target = Some((stream, *cand));
                break;
            }
            Ok(Err(e)) => {
                debug!(candidate = %cand, error = %e, "candidate unreachable");
                last_err = Some(ReplyCode::from_io_error(&e));
            }
            Err(_) => last_err = Some(ReplyCode::TtlExpired),
        }
    }
    let Some((outbound, peer)) = target else {
        let code = last_err.unwrap_or(ReplyCode::HostUnreachable);
        let _ = client.write_all(&wire::encode_reply(code, None)).await;
        let _ = client.shutdown().await;
        return Ok(RelaySummary {
            reply: code,
            client_family,
            target: None,
            bytes_up: 0,
            bytes_down: 0,
        });
    };
    let _ = outbound.set_nodelay(true);
    *shared.target.lock().unwrap_or_else(|e| e.into_inner()) = Some(peer);
    let bound = outbound.local_addr()?;
    client
        .write_all(&wire::encode_reply(ReplyCode::Succeeded, Some(bound)))
        .await?;
    shared.advance(RelayState::Relaying);
    session.registry.relayed.fetch_add(1, Ordering::Relaxed);
    if Family::of_addr(&peer) != client_family {
        session.registry.cross_family.fetch_add(1, Ordering::Relaxed);
    }

    let result = splice(client, outbound, &shared.bytes_up, &shared.bytes_down, settings).await;
    shared.advance(RelayState::Closed);
    let summary = RelaySummary {
        reply: ReplyCode::Succeeded,
        client_family,
        target: Some(peer),
        bytes_up: shared.bytes_up.load(Ordering::Relaxed),
        bytes_down: shared.bytes_down.load(Ordering::Relaxed),
    };
    match result {
        Ok(()) => Ok(summary),
        Err(e) if is_disconnect(&e) => Ok(summary),
        Err(e) => Err(e),
    }
}

fn is_disconnect(e: &io::Error) -> bool {
    use io::ErrorKind::*;
    matches!(
        e.kind(),
        ConnectionReset | BrokenPipe | ConnectionAborted | UnexpectedEof
    )
}

/// Bidirectional copy with half-close propagation: end-of-stream on one
/// side shuts down the write half of the other while the opposite
/// direction keeps flowing.
pub async fn splice<A, B>(a: A, b: B, up: &AtomicU64, down: &AtomicU64, settings: &PumpSettings) -> io::Result<()>
where
    A: AsyncRead + AsyncWrite,
    B: AsyncRead + AsyncWrite,
{
    let (ar, aw) = tokio::io::split(a);
    let (br, bw) = tokio::io::split(b);
    let started = tokio::time::Instant::now();
    let last_activity = AtomicU64::new(0);
    let copy_up = copy_half(ar, bw, settings.buffer_size, up, &last_activity, started);
    let copy_down = copy_half(br, aw, settings.buffer_size, down, &last_activity, started);
    let idle = async {
        loop {
            let last = Duration::from_millis(last_activity.load(Ordering::Relaxed));
            let deadline = last + settings.idle_timeout;
            let elapsed = started.elapsed();
            if elapsed >= deadline {
                return;
            }
            tokio::time::sleep(deadline - elapsed).await;
        }
    };
    tokio::select! {
        r = async { tokio::try_join!(copy_up, copy_down).map(|_| ()) } => r,
        _ = idle => Err(io::Error::new(io::ErrorKind::TimedOut, "relay session idle")),
    }
}

async fn copy_half<R, W>(
    mut reader: R,
    mut writer: W,
    buffer_size: usize,
    counter: &AtomicU64,
    last_activity: &AtomicU64,
    started: tokio::time::Instant,
) -> io::Result<()>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut buf = vec![0u8; buffer_size.max(1)];
    loop {
        let n = reader.read(&mut buf).await?;
        if n == 0 {
            // Peer may already be gone; the other direction decides the outcome.
            let _ = writer.shutdown().await;
            return Ok(());
        }
        writer.write_all(&buf[..n]).await?;
        counter.fetch_add(n as u64, Ordering::Relaxed);
        last_activity.store(started.elapsed().as_millis() as u64, Ordering::Relaxed);
    }
}

async fn read_request<S: AsyncRead + Unpin>(stream: &mut S) -> io::Result<Result<ConnectRequest, SocksError>> {
    let mut buf = vec![0u8; 4];
    stream.read_exact(&mut buf).await?;
    if buf[3] == wire::ATYP_DOMAIN {
        buf.push(stream.read_u8().await?);
    }
    let len = match wire::request_len(&buf) {
        Ok(len) => len,
        Err(e) => return Ok(Err(e)),
    };
    let have = buf.len();
    buf.resize(len, 0);
    stream.read_exact(&mut buf[have..]).await?;
    Ok(wire::parse_connect(&buf))
}

/// Runs the SOCKS server side of one accepted connection to completion.
pub async fn serve_connection<S>(
    mut stream: S,
    client_addr: SocketAddr,
    policy: &ResolverPolicy,
    registry: &Arc<SessionRegistry>,
    settings: &PumpSettings,
) -> io::Result<RelaySummary>
where
    S: AsyncRead + AsyncWrite + Unpin,
{
    let session = registry.open(client_addr);
    let client_family = Family::of_addr(&client_addr);
    let refused = |reply| RelaySummary {
        reply,
        client_family,
        target: None,
        bytes_up: 0,
        bytes_down: 0,
    };

    let mut greeting = vec![0u8; 2];
    stream.read_exact(&mut greeting).await?;
    let n = match wire::greeting_len(&greeting) {
        Ok(n) => n,
        Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
    };
    greeting.resize(n, 0);
    stream.read_exact(&mut greeting[2..]).await?;
    let selection = wire::negotiate(&greeting).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    stream.write_all(&selection.reply()).await?;
    if selection == MethodSelection::NoAcceptable {
        let _ = stream.shutdown().await;
        return Ok(refused(ReplyCode::NotAllowed));
    }

    let request = match read_request(&mut stream).await? {
        Ok(req) => req,
        Err(SocksError::Rejected { code }) => {
            stream.write_all(&wire::encode_reply(code, None)).await?;
            let _ = stream.shutdown().await;
            return Ok(refused(code));
        }
        Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
    };
    let candidates = match policy.resolve(&request).await {
        Ok(c) => c,
        Err(e) => {
            let code = e.reply_code();
            stream.write_all(&wire::encode_reply(code, None)).await?;
            let _ = stream.shutdown().await;
            return Ok(refused(code));
        }
    };
    establish_and_pump(stream, &candidates, &session, settings).await
}

/// Opens a stream to `target` through the SOCKS5 relay at `proxy`.
pub async fn connect_through(proxy: SocketAddr, target: &ConnectRequest) -> io::Result<TcpStream> {
    let mut stream = TcpStream::connect(proxy).await?;
    let _ = stream.set_nodelay(true);
    stream.write_all(&[wire::VERSION, 0x01, wire::METHOD_NO_AUTH]).await?;
    let mut sel = [0u8; 2];
    stream.read_exact(&mut sel).await?;
    if sel != [wire::VERSION, wire::METHOD_NO_AUTH] {
        return Err(io::Error::new(io::ErrorKind::PermissionDenied, "relay refused no-auth"));
    }
    stream.write_all(&target.to_bytes()).await?;
    let mut head = vec![0u8; 5];
    stream.read_exact(&mut head).await?;
    let len = wire::request_len(&head).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    head.resize(len, 0);
    stream.read_exact(&mut head[5..]).await?;
    let (code, _) = wire::parse_reply(&head).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    match code {
        ReplyCode::Succeeded => Ok(stream),
        ReplyCode::ConnectionRefused => Err(io::Error::new(
            io::ErrorKind::ConnectionRefused,
            "relay: connection refused",
        )),
        ReplyCode::HostUnreachable => Err(io::Error::new(
            io::ErrorKind::HostUnreachable,
            "relay: host unreachable",
        )),
        ReplyCode::NetworkUnreachable => Err(io::Error::new(
            io::ErrorKind::NetworkUnreachable,
            "relay: network unreachable",
        )),
        ReplyCode::TtlExpired => Err(io::Error::new(io::ErrorKind::TimedOut, "relay: connect timed out")),
        other => Err(io::Error::other(format!("relay replied {other:?}"))),
    }
}

/// A running relay with one listener per configured family.
pub struct RelayServer {
    local_v4: Option<SocketAddr>,
    local_v6: Option<SocketAddr>,
    registry: Arc<SessionRegistry>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

#[derive(Debug, thiserror::Error)]
#[error("cannot listen on {addr}: {source}")]
pub struct BindError {
    pub addr: SocketAddr,
    #[source]
    pub source: io::Error,
}

impl RelayServer {
    pub async fn start(config: &SocksConfig, policy: ResolverPolicy) -> Result<Self, BindError> {
        let registry = SessionRegistry::new();
        let (stop, stop_rx) = watch::channel(false);
        let policy = Arc::new(policy);
        let settings = config.pump_settings();
        let mut server = RelayServer {
            local_v4: None,
            local_v6: None,
            registry: registry.clone(),
            stop,
            tasks: Vec::new(),
        };
        for addr in [config.listen_v4, config.listen_v6].into_iter().flatten() {
            let listener = crate::net::bind_listener(addr).map_err(|source| BindError { addr, source })?;
            let local = listener.local_addr().map_err(|source| BindError { addr, source })?;
            match Family::of_addr(&local) {
                Family::V4 => server.local_v4 = Some(local),
                Family::V6 => server.local_v6 = Some(local),
            }
            info!(%local, "socks relay listening");
            server.tasks.push(tokio::spawn(accept_loop(
                listener,
                policy.clone(),
                registry.clone(),
                settings,
                stop_rx.clone(),
            )));
        }
        Ok(server)
    }

    pub fn local_addr(&self, family: Family) -> Option<SocketAddr> {
        match family {
            Family::V4 => self.local_v4,
            Family::V6 => self.local_v6,
        }
    }

    pub fn registry(&self) -> &Arc<SessionRegistry> {
        &self.registry
    }

    /// Stops accepting and tears down every live session.
    pub fn stop(&mut self) {
        let _ = self.stop.send(true);
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }
}

impl Drop for RelayServer {
    fn drop(&mut self) {
        self.stop();
    }
}

async fn accept_loop(
    listener: TcpListener,
    policy: Arc<ResolverPolicy>,
    registry: Arc<SessionRegistry>,
    settings: PumpSettings,
    stop: watch::Receiver<bool>,
) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(x) => x,
            Err(e) => {
                warn!(error = %e, "socks accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let policy = policy.clone();
        let registry = registry.clone();
        let mut stop = stop.clone();
        tokio::spawn(async move {
            tokio::select! {
                r = serve_connection(stream, peer, &policy, &registry, &settings) => match r {
                    Ok(s) => debug!(client = %peer, target = ?s.target, up = s.bytes_up, down = s.bytes_down, reply = ?s.reply, "relay session done"),
                    Err(e) => debug!(client = %peer, error = %e, "relay session failed"),
                },
                _ = stop.wait_for(|s| *s) => {}
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_only_moves_forward() {
        let reg = SessionRegistry::new();
        let s = reg.open("127.0.0.1:1".parse().unwrap());
        assert_eq!(s.state(), RelayState::Negotiating);
        s.shared.advance(RelayState::Relaying);
        s.shared.advance(RelayState::Connecting);
        assert_eq!(s.state(), RelayState::Relaying);
        assert_eq!(reg.active_count(), 1);
        drop(s);
        assert_eq!(reg.active_count(), 0);
        assert_eq!(reg.stats().accepted, 1);
    }

    #[tokio::test]
    async fn splice_propagates_half_close() {
        let (client, relay_a) = tokio::io::duplex(64);
        let (relay_b, server) = tokio::io::duplex(64);
        let up = AtomicU64::new(0);
        let down = AtomicU64::new(0);
        let settings = PumpSettings::default();
        let pump = splice(relay_a, relay_b, &up, &down, &settings);
        let peers = async move {
            let (mut cr, mut cw) = tokio::io::split(client);
            let (mut sr, mut sw) = tokio::io::split(server);
            cw.write_all(b"hello").await.unwrap();
            cw.shutdown().await.unwrap();
            let mut got = Vec::new();
            sr.read_to_end(&mut got).await.unwrap();
            assert_eq!(got, b"hello");
            // the other direction still flows after the first one closed
            sw.write_all(b"still open").await.unwrap();
            sw.shutdown().await.unwrap();
            let mut back = Vec::new();
            cr.read_to_end(&mut back).await.unwrap();
            assert_eq!(back, b"still open");
        };
        let (r, ()) = tokio::join!(pump, peers);
        r.unwrap();
        assert_eq!((up.into_inner(), down.into_inner()), (5, 10));
    }

    #[tokio::test(start_paused = true)]
    async fn idle_session_times_out() {
        let (_client, relay_a) = tokio::io::duplex(64);
        let (relay_b, _server) = tokio::io::duplex(64);
        let settings = PumpSettings {
            idle_timeout: Duration::from_secs(300),
            ..Default::default()
        };
        let (up, down) = (AtomicU64::new(0), AtomicU64::new(0));
        let err = splice(relay_a, relay_b, &up, &down, &settings).await.unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::TimedOut);
    }
}
