//! Device registry: authoritative snapshots, version history and the TTL cache.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use vqpu_core::clock::Clock;
use vqpu_core::device::{DeviceDescriptor, SnapshotError};
use vqpu_core::task::CacheStats;
use vqpu_core::{DeviceSnapshot, ErrorCode, ErrorEnvelope, EventType};

use crate::events::EventHub;
use crate::journal::{Entry, Journal, Recovered};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown device '{0}'")]
    UnknownDevice(String),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("store write failed: {0}")]
    Store(String),
}

impl RegistryError {
    pub fn to_envelope(&self) -> ErrorEnvelope {
        match self {
            RegistryError::UnknownDevice(id) => ErrorEnvelope::new(ErrorCode::UnknownDevice, self.to_string())
                .with_detail(serde_json::json!({ "device_id": id })),
            RegistryError::Snapshot(e) => e.to_envelope(),
            RegistryError::Store(_) => ErrorEnvelope::new(ErrorCode::StoreError, self.to_string()),
        }
    }
}

#[derive(Default)]
struct Inner {
    current: BTreeMap<String, DeviceSnapshot>,
    history: BTreeMap<String, Vec<DeviceSnapshot>>,
    cache: HashMap<String, (DeviceSnapshot, DateTime<Utc>)>,
    stats: CacheStats,
}

pub struct DeviceRegistry {
    inner: Mutex<Inner>,
    ttl: Duration,
    clock: Arc<dyn Clock>,
    events: Arc<EventHub>,
    journal: Option<Arc<Journal>>,
}

impl DeviceRegistry {
    pub fn new(clock: Arc<dyn Clock>, events: Arc<EventHub>, ttl: Duration) -> Self {
        Self { inner: Mutex::new(Inner::default()), ttl, clock, events, journal: None }
    }

    /// Attaches a journal and restores the devices it recorded.
    pub fn with_journal(mut self, journal: Arc<Journal>, recovered: &Recovered) -> Self {
        {
            let inner = self.inner.get_mut().unwrap();
            for (id, versions) in &recovered.device_versions {
                let mut versions = versions.clone();
                versions.sort_by_key(|s| s.snapshot_version);
                let Some(latest) = versions.pop() else { continue };
                inner.history.insert(id.clone(), versions);
                if recovered.deleted.contains(id) {
                    inner.history.get_mut(id).unwrap().push(latest);
                } else {
                    inner.current.insert(id.clone(), latest);
                }
            }
        }
        self.journal = Some(journal);
        self
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Current authoritative snapshot, bypassing the cache.
    pub fn authoritative(&self, device_id: &str) -> Option<DeviceSnapshot> {
        self.lock().current.get(device_id).cloned()
    }

    /// Read through the TTL cache. An entry is served only while unexpired.
    pub fn cached(&self, device_id: &str) -> Option<DeviceSnapshot> {
        let now = self.clock.now();
        let mut inner = self.lock();
        if let Some((snap, expires_at)) = inner.cache.get(device_id) {
            if now < *expires_at {
                let snap = snap.clone();
                inner.stats.hits += 1;
                return Some(snap);
            }
        }
        inner.stats.misses += 1;
        let snap = inner.current.get(device_id).cloned();
        match &snap {
            Some(s) => {
                inner.cache.insert(device_id.to_string(), (s.clone(), now + self.ttl));
            }
            None => {
                inner.cache.remove(device_id);
            }
        }
        snap
    }

    /// All devices through the cache, ordered by id.
    pub fn list_cached(&self) -> Vec<DeviceSnapshot> {
        let ids: Vec<String> = self.lock().current.keys().cloned().collect();
        ids.iter().filter_map(|id| self.cached(id)).collect()
    }

    /// Creates or replaces a device. The new snapshot gets the next version;
    /// the cache entry is gone before this returns.
    pub fn put(&self, device_id: &str, descriptor: DeviceDescriptor) -> Result<DeviceSnapshot, RegistryError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let previous = inner.current.get(device_id).map(|s| s.snapshot_version);
        let last_version = previous
            .into_iter()
            .chain(inner.history.get(device_id).into_iter().flatten().map(|s| s.snapshot_version))
            .max()
            .unwrap_or(0);
        let snapshot = descriptor.into_snapshot(device_id, last_version + 1, now)?;
        if let Some(j) = &self.journal {
            j.append(&Entry::Device(Box::new(snapshot.clone()))).map_err(|e| RegistryError::Store(e.to_string()))?;
        }
        if let Some(old) = inner.current.insert(device_id.to_string(), snapshot.clone()) {
            inner.history.entry(device_id.to_string()).or_default().push(old);
        }
        if inner.cache.remove(device_id).is_some() {
            inner.stats.invalidations += 1;
        }
        self.events.publish(
            EventType::DeviceUpdated,
            None,
            Some(device_id),
            serde_json::json!({
                "snapshot_version": snapshot.snapshot_version,
                "previous_version": previous,
            }),
        );
        Ok(snapshot)
    }

    /// Updates an existing device only.
    pub fn mutate(&self, device_id: &str, descriptor: DeviceDescriptor) -> Result<DeviceSnapshot, RegistryError> {
        if self.authoritative(device_id).is_none() {
            return Err(RegistryError::UnknownDevice(device_id.to_string()));
        }
        self.put(device_id, descriptor)
    }

    pub fn delete(&self, device_id: &str) -> Result<DeviceSnapshot, RegistryError> {
        let mut inner = self.lock();
        let Some(old) = inner.current.get(device_id).cloned() else {
            return Err(RegistryError::UnknownDevice(device_id.to_string()));
        };
        if let Some(j) = &self.journal {
            j.append(&Entry::DeviceDeleted { device_id: device_id.to_string() })
                .map_err(|e| RegistryError::Store(e.to_string()))?;
        }
        inner.current.remove(device_id);
        inner.history.entry(device_id.to_string()).or_default().push(old.clone());
        if inner.cache.remove(device_id).is_some() {
            inner.stats.invalidations += 1;
        }
        self.events.publish(
            EventType::DeviceUpdated,
            None,
            Some(device_id),
            serde_json::json!({ "deleted": true, "previous_version": old.snapshot_version }),
        );
        Ok(old)
    }

    /// Prior versions of a device, oldest first.
    pub fn history(&self, device_id: &str) -> Vec<DeviceSnapshot> {
        self.lock().history.get(device_id).cloned().unwrap_or_default()
    }

    pub fn stats(&self) -> CacheStats {
        self.lock().stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vqpu_core::clock::ManualClock;
    use vqpu_core::fixtures::heavy_hex_20;

    fn setup() -> (Arc<ManualClock>, DeviceRegistry) {
        let clock = Arc::new(ManualClock::default());
        let hub = Arc::new(EventHub::in_memory(clock.clone()));
        (clock.clone(), DeviceRegistry::new(clock, hub, Duration::seconds(5)))
    }

    #[test]
    fn versions_increase_and_history_accumulates() {
        let (_, reg) = setup();
        assert_eq!(reg.put("a", heavy_hex_20(true)).unwrap().snapshot_version, 1);
        assert_eq!(reg.put("a", heavy_hex_20(false)).unwrap().snapshot_version, 2);
        assert_eq!(reg.history("a").len(), 1);
        reg.delete("a").unwrap();
        assert!(reg.authoritative("a").is_none());
        assert_eq!(reg.put("a", heavy_hex_20(false)).unwrap().snapshot_version, 3);
        assert!(matches!(reg.mutate("zz", heavy_hex_20(false)), Err(RegistryError::UnknownDevice(_))));
    }

    #[test]
    fn ttl_hits_misses_and_invalidation() {
        let (clock, reg) = setup();
        reg.put("a", heavy_hex_20(true)).unwrap();
        reg.cached("a");
        reg.cached("a");
        assert_eq!(reg.stats(), CacheStats { hits: 1, misses: 1, invalidations: 0 });
        clock.advance(Duration::seconds(5));
        reg.cached("a");
        assert_eq!(reg.stats().misses, 2);
        let v2 = reg.mutate("a", heavy_hex_20(false)).unwrap();
        assert_eq!(reg.stats().invalidations, 1);
        assert_eq!(reg.cached("a").unwrap().snapshot_version, v2.snapshot_version);
    }

    #[test]
    fn journal_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        {
            let (j, rec) = Journal::open(&path).unwrap();
            let (_, reg) = setup();
            let reg = reg.with_journal(Arc::new(j), &rec);
            reg.put("a", heavy_hex_20(true)).unwrap();
            reg.put("a", heavy_hex_20(false)).unwrap();
            reg.put("b", heavy_hex_20(false)).unwrap();
            reg.delete("b").unwrap();
        }
        let (j, rec) = Journal::open(&path).unwrap();
        let (_, reg) = setup();
        let reg = reg.with_journal(Arc::new(j), &rec);
        assert_eq!(reg.authoritative("a").unwrap().snapshot_version, 2);
        assert!(reg.authoritative("b").is_none());
        assert_eq!(reg.put("b", heavy_hex_20(false)).unwrap().snapshot_version, 2);
    }
}
