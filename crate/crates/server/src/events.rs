//! Event broker: global sequence numbers, JSON-lines event log, a retained
//! replay window, and bounded per-subscriber queues.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use tokio::sync::mpsc;
use vqpu_core::clock::Clock;
use vqpu_core::{EventType, LifecycleEvent};

use crate::journal::LineLog;

pub const DEFAULT_REPLAY_WINDOW: usize = 10_000;
pub const DEFAULT_SUBSCRIBER_CAPACITY: usize = 256;

struct Subscriber {
    id: u64,
    tx: mpsc::Sender<LifecycleEvent>,
}

struct Inner {
    next_sequence: u64,
    retained: VecDeque<LifecycleEvent>,
    subscribers: Vec<Subscriber>,
}

pub struct EventHub {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    log: Option<LineLog>,
    window: usize,
    capacity: usize,
    next_subscriber: AtomicU64,
    disconnected: AtomicU64,
}

/// Result of subscribing: retained history after the requested point, then
/// a live receiver that continues exactly where the history ends.
pub struct Subscription {
    pub id: u64,
    pub replay: Vec<LifecycleEvent>,
    /// `(requested, oldest_retained)` when the requested point has already
    /// left the window; replay then starts at the window start.
    pub window_exceeded: Option<(u64, u64)>,
    pub live: mpsc::Receiver<LifecycleEvent>,
}

impl EventHub {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::build(clock, None, VecDeque::new(), 1, DEFAULT_REPLAY_WINDOW, DEFAULT_SUBSCRIBER_CAPACITY)
    }

    /// Opens a hub backed by the event log at `path`, resuming its sequence.
    pub fn open(clock: Arc<dyn Clock>, path: &Path, window: usize, capacity: usize) -> io::Result<Self> {
        let mut retained = VecDeque::new();
        let mut last = 0;
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                let Ok(event) = serde_json::from_str::<LifecycleEvent>(&line) else {
                    continue;
                };
                last = last.max(event.sequence);
                retained.push_back(event);
                if retained.len() > window {
                    retained.pop_front();
                }
            }
        }
        let log = LineLog::open(path)?;
        Ok(Self::build(clock, Some(log), retained, last + 1, window, capacity))
    }

    fn build(
        clock: Arc<dyn Clock>,
        log: Option<LineLog>,
        retained: VecDeque<LifecycleEvent>,
        next_sequence: u64,
        window: usize,
        capacity: usize,
    ) -> Self {
        Self {
            inner: Mutex::new(Inner { next_sequence, retained, subscribers: Vec::new() }),
            clock,
            log,
            window: window.max(1),
            capacity: capacity.max(1),
            next_subscriber: AtomicU64::new(1),
            disconnected: AtomicU64::new(0),
        }
    }

    pub fn with_limits(mut self, window: usize, capacity: usize) -> Self {
        self.window = window.max(1);
        self.capacity = capacity.max(1);
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Assigns the next sequence number and fans the event out. Never blocks on
    /// a subscriber: one whose queue is full is dropped on the spot.
    pub fn publish(
        &self,
        event_type: EventType,
        task_id: Option<&str>,
        device_id: Option<&str>,
        payload: serde_json::Value,
    ) -> LifecycleEvent {
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let event = LifecycleEvent {
            sequence: inner.next_sequence,
            event_type,
            task_id: task_id.map(str::to_string),
            device_id: device_id.map(str::to_string),
            timestamp: self.clock.now(),
            payload,
        };
        inner.next_sequence += 1;
        if let Some(log) = &self.log {
            if let Err(e) = log.append(&event) {
                tracing::error!("event log append failed: {e}");
            }
        }
        inner.retained.push_back(event.clone());
        if inner.retained.len() > self.window {
            inner.retained.pop_front();
        }
        let before = inner.subscribers.len();
        inner.subscribers.retain(|s| s.tx.try_send(event.clone()).is_ok());
        let dropped = before - inner.subscribers.len();
        if dropped > 0 {
            self.disconnected.fetch_add(dropped as u64, Ordering::Relaxed);
        }
        event
    }

    /// Registers a subscriber. History and live registration happen under one
    /// lock, so no event can fall between them or appear in both.
    pub fn subscribe(&self, after: Option<u64>) -> Subscription {
        let (tx, live) = mpsc::channel(self.capacity);
        let id = self.next_subscriber.fetch_add(1, Ordering::Relaxed);
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let mut window_exceeded = None;
        let replay = match after {
            None => Vec::new(),
            Some(k) => {
                let oldest = inner.retained.front().map(|e| e.sequence).unwrap_or(inner.next_sequence);
                if k + 1 < oldest {
                    window_exceeded = Some((k, oldest));
                }
                inner.retained.iter().filter(|e| e.sequence > k).cloned().collect()
            }
        };
        inner.subscribers.push(Subscriber { id, tx });
        Subscription { id, replay, window_exceeded, live }
    }

    pub fn unsubscribe(&self, id: u64) {
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        inner.subscribers.retain(|s| s.id != id);
    }

    pub fn last_sequence(&self) -> u64 {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).next_sequence - 1
    }

    /// Copy of the retained window, oldest first.
    pub fn retained(&self) -> Vec<LifecycleEvent> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).retained.iter().cloned().collect()
    }

    pub fn subscriber_count(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).subscribers.len()
    }

    /// Subscribers dropped for overflowing their queue.
    pub fn disconnected_count(&self) -> u64 {
        self.disconnected.load(Ordering::Relaxed)
    }
}
