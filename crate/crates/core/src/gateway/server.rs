use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::{JoinHandle, JoinSet};
use tracing::{debug, info, warn};

use super::{ClientContext, Gateway, RelayRoute, ResolvedConfig};
use crate::http::{Conn, HttpError, Response};
use crate::socks::{BindError, Family, RelayServer, SocksConfig};

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Bind(#[from] BindError),
    #[error("no gateway listener configured")]
    NoListener,
}

/// A running gateway: its listeners, the relay and the background tasks.
pub struct GatewayServer {
    gateway: Arc<Gateway>,
    local_v4: Option<SocketAddr>,
    local_v6: Option<SocketAddr>,
    relay: Option<RelayServer>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl GatewayServer {
    /// Binds every listener (failing fast on the first bind error), starts
    /// the relay and the background prober and purge tasks.
    pub async fn start(config: ResolvedConfig) -> Result<Self, StartError> {
        let section = &config.raw.gateway;
        if section.listen_v4.is_none() && section.listen_v6.is_none() {
            return Err(StartError::NoListener);
        }
        let mut listeners = Vec::new();
        for addr in [section.listen_v4, section.listen_v6].into_iter().flatten() {
            let listener = crate::net::bind_listener(addr).map_err(|source| BindError { addr, source })?;
            listeners.push(listener);
        }

        // The standalone relay serves the configured SOCKS listeners. When
        // it is switched off but cross-family forwarding is wanted, a
        // private relay runs on loopback ephemeral ports instead.
        let relay = if config.raw.socks.enabled {
            Some(RelayServer::start(&config.raw.socks, config.resolver.clone()).await?)
        } else if section.relay_enabled {
            let private = SocksConfig {
                enabled: true,
                listen_v4: Some(SocketAddr::from(([127, 0, 0, 1], 0))),
                listen_v6: Some("[::1]:0".parse().expect("literal")),
                ..config.raw.socks.clone()
            };
            Some(RelayServer::start(&private, config.resolver.clone()).await?)
        } else {
            None
        };
        let route = relay.as_ref().map(|r| RelayRoute {
            v4: r.local_addr(Family::V4),
            v6: r.local_addr(Family::V6),
            sessions: r.registry().clone(),
        });

        let gateway = Gateway::new(&config, route);
        let (stop, stop_rx) = watch::channel(false);
        let mut server = GatewayServer {
            gateway: gateway.clone(),
            local_v4: None,
            local_v6: None,
            relay,
            stop,
            tasks: Vec::new(),
        };
        for listener in listeners {
            let local = listener.local_addr().map_err(|source| BindError {
                addr: local_or_unspecified(&listener),
                source,
            })?;
            let family = Family::of_addr(&local);
            match family {
                Family::V4 => server.local_v4 = Some(local),
                Family::V6 => server.local_v6 = Some(local),
            }
            info!(%local, "gateway listening");
            server.tasks.push(tokio::spawn(accept_loop(
                listener,
                family,
                gateway.clone(),
                stop_rx.clone(),
            )));
        }

        let probe_every = section.probe_interval();
        if let Some(every) = probe_every {
            let gw = gateway.clone();
            let mut stop = stop_rx.clone();
            server.tasks.push(tokio::spawn(async move {
                let mut tick = tokio::time::interval(every);
                tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    tokio::select! {
                        _ = tick.tick() => gw.probe_all().await,
                        _ = stop.changed() => break,
                    }
                }
            }));
        }

        let horizon = gateway.guard().config().idle_purge();
        if !horizon.is_zero() {
            let gw = gateway.clone();
            let mut stop = stop_rx;
            server.tasks.push(tokio::spawn(async move {
                let mut tick = tokio::time::interval((horizon / 2).max(Duration::from_millis(100)));
                loop {
                    tokio::select! {
                        _ = tick.tick() => {
                            let purged = gw.guard().purge_idle(Instant::now(), horizon);
                            if purged > 0 {
                                debug!(purged, "guard purged idle clients");
                            }
                        }
                        _ = stop.changed() => break,
                    }
                }
            }));
        }
        Ok(server)
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn local_addr(&self, family: Family) -> Option<SocketAddr> {
        match family {
            Family::V4 => self.local_v4,
            Family::V6 => self.local_v6,
        }
    }

    pub fn relay_addr(&self, family: Family) -> Option<SocketAddr> {
        self.relay.as_ref().and_then(|r| r.local_addr(family))
    }

    pub fn stop(&mut self) {
        let _ = self.stop.send(true);
        for t in self.tasks.drain(..) {
            t.abort();
        }
        if let Some(relay) = self.relay.as_mut() {
            relay.stop();
        }
    }
}

impl Drop for GatewayServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn local_or_unspecified(listener: &TcpListener) -> SocketAddr {
    listener
        .local_addr()
        .unwrap_or_else(|_| SocketAddr::from(([0, 0, 0, 0], 0)))
}

async fn accept_loop(listener: TcpListener, family: Family, gateway: Arc<Gateway>, mut stop: watch::Receiver<bool>) {
    let mut conns = JoinSet::new();
    loop {
        let accepted = tokio::select! {
            r = listener.accept() => r,
            _ = stop.changed() => break,
        };
        let (stream, peer) = match accepted {
            Ok(x) => x,
            Err(e) => {
                warn!(error = %e, "gateway accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let ctx = ClientContext::new(peer, family);
        conns.spawn(serve_client(stream, ctx, gateway.clone()));
        while conns.try_join_next().is_some() {}
    }
    conns.shutdown().await;
}

async fn serve_client(stream: TcpStream, ctx: ClientContext, gateway: Arc<Gateway>) {
    let mut conn = Conn::new(stream);
    let (mut seen_in, mut seen_out) = (0, 0);
    loop {
        let req = match conn.read_request().await {
            Ok(Some(r)) => r,
            Ok(None) => break,
            Err(HttpError::Io(_)) | Err(HttpError::UnexpectedEof) => break,
            Err(e) => {
                debug!(peer = %ctx.peer, error = %e, "bad client request");
                let resp = Response::json(400, r#"{"status":"bad_request"}"#).with_header("Connection", "close");
                let _ = conn.send_response(&resp).await;
                break;
            }
        };
        let close = req.wants_close();
        let mut resp = gateway.handle_request(&ctx, req).await;
        if close {
            resp.set_header("Connection", "close");
        }
        let sent = conn.send_response(&resp).await;
        gateway.count_client_bytes(conn.bytes_read - seen_in, conn.bytes_written - seen_out);
        (seen_in, seen_out) = (conn.bytes_read, conn.bytes_written);
        if sent.is_err() || close {
            break;
        }
    }
    gateway.count_client_bytes(conn.bytes_read - seen_in, conn.bytes_written - seen_out);
    let _ = conn.shutdown().await;
}
