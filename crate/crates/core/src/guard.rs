//! Per-client request screening: a sliding-window rate limit and a
//! consecutive-identical-request detector, both leading to a timed block.

use std::collections::VecDeque;
use std::net::IpAddr;
use std::time::{Duration, Instant};

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use crate::cache::Digest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardConfig {
    pub enabled: bool,
    /// Maximum allowed requests per window (R).
    pub rate_limit: usize,
    /// Sliding window length in seconds (W).
    pub window_seconds: f64,
    /// Maximum run of consecutive identical requests (K).
    pub repeat_limit: usize,
    /// Block duration in seconds (B).
    pub block_seconds: f64,
    pub idle_purge_seconds: f64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            enabled: true,
            rate_limit: 100,
            window_seconds: 10.0,
            repeat_limit: 50,
            block_seconds: 60.0,
            idle_purge_seconds: 300.0,
        }
    }
}

impl GuardConfig {
    pub fn window(&self) -> Duration {
        Duration::from_secs_f64(self.window_seconds)
    }

    pub fn block(&self) -> Duration {
        Duration::from_secs_f64(self.block_seconds)
    }

    pub fn idle_purge(&self) -> Duration {
        Duration::from_secs_f64(self.idle_purge_seconds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockReason {
    RateExceeded,
    RepeatBurst,
    StillBlocked,
}

impl BlockReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockReason::RateExceeded => "rate_exceeded",
            BlockReason::RepeatBurst => "repeat_burst",
            BlockReason::StillBlocked => "still_blocked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardDecision {
    Allow,
    Blocked { reason: BlockReason, retry_after: Duration },
}

impl GuardDecision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, GuardDecision::Allow)
    }

    pub fn reason(&self) -> Option<BlockReason> {
        match self {
            GuardDecision::Allow => None,
            GuardDecision::Blocked { reason, .. } => Some(*reason),
        }
    }
}

/// Per-client screening state. The window holds the timestamps of allowed
/// requests only.
#[derive(Debug, Clone)]
pub struct ClientRateState {
    window: VecDeque<Instant>,
    blocked_until: Option<Instant>,
    repeat_digest: Option<Digest>,
    repeat_count: usize,
    last_seen: Instant,
}

impl ClientRateState {
    fn new(now: Instant) -> Self {
        ClientRateState {
            window: VecDeque::new(),
            blocked_until: None,
            repeat_digest: None,
            repeat_count: 0,
            last_seen: now,
        }
    }

    pub fn blocked_until(&self) -> Option<Instant> {
        self.blocked_until
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    fn check(&mut self, digest: Digest, now: Instant, cfg: &GuardConfig) -> GuardDecision {
        if let Some(until) = self.blocked_until {
            if now < until {
                return GuardDecision::Blocked {
                    reason: BlockReason::StillBlocked,
                    retry_after: until - now,
                };
            }
            self.blocked_until = None;
            self.repeat_digest = None;
            self.repeat_count = 0;
        }
        let window = cfg.window();
        while let Some(&oldest) = self.window.front() {
            if now.saturating_duration_since(oldest) > window {
                self.window.pop_front();
            } else {
                break;
            }
        }
        let gap_ok = self
            .window
            .back()
            .is_some_and(|&last| now.saturating_duration_since(last) <= window);
        self.last_seen = now;

        if self.window.len() + 1 > cfg.rate_limit {
            return self.block(BlockReason::RateExceeded, now, cfg);
        }
        if gap_ok && self.repeat_digest == Some(digest) {
            if self.repeat_count + 1 > cfg.repeat_limit {
                return self.block(BlockReason::RepeatBurst, now, cfg);
            }
            self.repeat_count += 1;
        } else {
            self.repeat_digest = Some(digest);
            self.repeat_count = 1;
        }
        self.window.push_back(now);
        GuardDecision::Allow
    }

    fn block(&mut self, reason: BlockReason, now: Instant, cfg: &GuardConfig) -> GuardDecision {
        let block = cfg.block().max(Duration::from_nanos(1));
        self.blocked_until = Some(now + block);
        GuardDecision::Blocked {
            reason,
            retry_after: block,
        }
    }
}

/// Normalized textual client identity: the remote IP, with IPv4-mapped
/// IPv6 addresses folded to IPv4.
pub fn client_id(ip: IpAddr) -> String {
    ip.to_canonical().to_string()
}

/// Concurrent table of client states.
pub struct DosGuard {
    config: GuardConfig,
    clients: DashMap<String, ClientRateState>,
}

impl DosGuard {
    pub fn new(config: GuardConfig) -> Self {
        DosGuard {
            config,
            clients: DashMap::new(),
        }
    }

    pub fn config(&self) -> &GuardConfig {
        &self.config
    }

    /// Records one request and decides whether it may proceed. A request
    /// arriving while the client is blocked is not recorded.
    pub fn record_and_check(&self, client_id: &str, request_digest: Digest, now: Instant) -> GuardDecision {
        if !self.config.enabled {
            return GuardDecision::Allow;
        }
        let mut state = self
            .clients
            .entry(client_id.to_owned())
            .or_insert_with(|| ClientRateState::new(now));
        state.check(request_digest, now, &self.config)
    }

    /// Drops clients idle since `now - idle_horizon` that are not blocked.
    pub fn purge_idle(&self, now: Instant, idle_horizon: Duration) -> usize {
        let before = self.clients.len();
        self.clients.retain(|_, s| {
            let blocked = s.blocked_until.is_some_and(|u| now < u);
            let idle = now.saturating_duration_since(s.last_seen) > idle_horizon;
            blocked || !idle
        });
        before - self.clients.len()
    }

    pub fn tracked_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn state(&self, client_id: &str) -> Option<ClientRateState> {
        self.clients.get(client_id).map(|s| s.clone())
    }
}
