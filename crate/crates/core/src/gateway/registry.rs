use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use super::config::DeviceRecord;
use crate::socks::Family;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Unknown,
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceStatus {
    pub health: Health,
    pub last_probe: Option<Instant>,
    pub consecutive_failures: u32,
    /// Family the device was last reached on.
    pub family: Option<Family>,
}

/// What a health update changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    None,
    WentUp,
    WentDown,
}

pub struct Device {
    pub record: DeviceRecord,
    status: Mutex<DeviceStatus>,
}

impl Device {
    pub fn new(record: DeviceRecord) -> Self {
        let family = record.endpoint.family();
        Device {
            record,
            status: Mutex::new(DeviceStatus {
                health: Health::Unknown,
                last_probe: None,
                consecutive_failures: 0,
                family,
            }),
        }
    }

    pub fn id(&self) -> &str {
        &self.record.device_id
    }

    pub fn status(&self) -> DeviceStatus {
        *self.status.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn health(&self) -> Health {
        self.status().health
    }

    /// Any success (probe or proxied request) marks the device up.
    pub fn record_success(&self, family: Family, probe_at: Option<Instant>) -> Transition {
        let mut s = self.status.lock().unwrap_or_else(|e| e.into_inner());
        let was = s.health;
        s.health = Health::Up;
        s.consecutive_failures = 0;
        s.family = Some(family);
        if probe_at.is_some() {
            s.last_probe = probe_at;
        }
        if was == Health::Up {
            Transition::None
        } else {
            Transition::WentUp
        }
    }

    /// Counts a failure. An unknown device goes down on its first failure;
    /// an up device once `threshold` consecutive failures accumulate.
    pub fn record_failure(&self, threshold: u32, probe_at: Option<Instant>) -> Transition {
        let mut s = self.status.lock().unwrap_or_else(|e| e.into_inner());
        s.consecutive_failures = s.consecutive_failures.saturating_add(1);
        if probe_at.is_some() {
            s.last_probe = probe_at;
        }
        let down = match s.health {
            Health::Down => false,
            Health::Unknown => true,
            Health::Up => s.consecutive_failures >= threshold.max(1),
        };
        if down {
            s.health = Health::Down;
            Transition::WentDown
        } else {
            Transition::None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("device {0:?} is already registered")]
    Duplicate(String),
}

#[derive(Default)]
pub struct DeviceRegistry {
    devices: RwLock<HashMap<String, Arc<Device>>>,
}

impl DeviceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a device. Returns whether an existing registration was
    /// replaced; without `replace` a duplicate id is an error.
    pub fn register(&self, record: DeviceRecord, replace: bool) -> Result<bool, RegistryError> {
        let mut map = self.devices.write().unwrap_or_else(|e| e.into_inner());
        let id = record.device_id.clone();
        if map.contains_key(&id) && !replace {
            return Err(RegistryError::Duplicate(id));
        }
        Ok(map.insert(id, Arc::new(Device::new(record))).is_some())
    }

    pub fn get(&self, id: &str) -> Option<Arc<Device>> {
        self.devices.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    pub fn list(&self) -> Vec<Arc<Device>> {
        let mut all: Vec<_> = self
            .devices
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect();
        all.sort_by(|a, b| a.id().cmp(b.id()));
        all
    }

    pub fn len(&self) -> usize {
        self.devices.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::MappingDictionary;

    fn record(id: &str) -> DeviceRecord {
        DeviceRecord::new(id, "[::1]:9091".parse().unwrap(), MappingDictionary::power_sensor())
    }

    #[test]
    fn duplicate_requires_replace() {
        let reg = DeviceRegistry::new();
        assert_eq!(reg.register(record("a"), false), Ok(false));
        assert_eq!(
            reg.register(record("a"), false),
            Err(RegistryError::Duplicate("a".into()))
        );
        assert_eq!(reg.register(record("a"), true), Ok(true));
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn health_transitions() {
        let d = Device::new(record("a"));
        assert_eq!(d.health(), Health::Unknown);
        assert_eq!(d.record_failure(3, None), Transition::WentDown);
        assert_eq!(d.health(), Health::Down);
        assert_eq!(d.record_failure(3, None), Transition::None);
        let now = Instant::now();
        assert_eq!(d.record_success(Family::V6, Some(now)), Transition::WentUp);
        let s = d.status();
        assert_eq!(
            (s.health, s.consecutive_failures, s.last_probe),
            (Health::Up, 0, Some(now))
        );
        assert_eq!(d.record_failure(3, None), Transition::None);
        assert_eq!(d.record_failure(3, None), Transition::None);
        assert_eq!(d.record_failure(3, None), Transition::WentDown);
        d.record_success(Family::V6, None);
        // failures are consecutive: a success in between resets the count
        d.record_failure(3, None);
        d.record_failure(3, None);
        d.record_success(Family::V6, None);
        assert_eq!(d.record_failure(3, None), Transition::None);
        assert_eq!(d.health(), Health::Up);
    }
}
