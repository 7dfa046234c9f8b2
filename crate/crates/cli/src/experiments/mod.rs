//! End-to-end evaluation scenarios. Each one talks to a running server only
//! through the public API, starts the agent processes it needs, and returns a
//! JSON-serialisable report with a pass/fail verdict.

pub mod binding;
pub mod concurrency;
pub mod fidelity;
pub mod latency;
pub mod recovery;

use std::collections::BTreeMap;
use std::fmt;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::Value;
use vqpu_agent::{AgentConfig, BackendConfig, DelaySpec, FaultPlan};
use vqpu_core::sim::{normalize_counts, total_variation_distance, Distribution};
use vqpu_core::task::SubmitRequest;
use vqpu_core::{DeviceDescriptor, EventType, LifecycleEvent, TaskRecord};

use crate::api::{Api, ApiError, SseFrame};
use crate::harness::Binaries;

pub const NOISY_DEVICE_JSON: &str = include_str!("../../fixtures/devices/heavy-hex-20-noisy.json");
pub const IDEAL_DEVICE_JSON: &str = include_str!("../../fixtures/devices/heavy-hex-20-ideal.json");

pub fn noisy_device() -> DeviceDescriptor {
    serde_json::from_str(NOISY_DEVICE_JSON).expect("packaged noisy fixture parses")
}

pub fn ideal_device() -> DeviceDescriptor {
    serde_json::from_str(IDEAL_DEVICE_JSON).expect("packaged ideal fixture parses")
}

#[derive(Debug)]
pub struct ExpError(pub String);

impl fmt::Display for ExpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ExpError {}

impl From<ApiError> for ExpError {
    fn from(e: ApiError) -> Self {
        ExpError(format!("API call failed: {e}"))
    }
}

impl From<std::io::Error> for ExpError {
    fn from(e: std::io::Error) -> Self {
        ExpError(format!("I/O failed: {e}"))
    }
}

pub type ExpResult<T> = Result<T, ExpError>;

pub fn fail<T>(msg: impl Into<String>) -> ExpResult<T> {
    Err(ExpError(msg.into()))
}

/// Verdict shared by every report.
pub trait Report: Serialize {
    fn passed(&self) -> bool;
    fn summary(&self) -> String;
}

/// Where an experiment runs: the server, the credentials for each role, the
/// executables and a scratch root for agent work directories.
#[derive(Clone)]
pub struct Lab {
    pub user: Api,
    pub admin: Api,
    pub agent_key: String,
    pub binaries: Binaries,
    pub work_root: PathBuf,
    /// Process id of the server when it runs on this host, for socket audits.
    pub server_pid: Option<u32>,
    /// Distinguishes device and agent names between runs on one server.
    pub tag: String,
}

impl Lab {
    pub fn server_url(&self) -> &str {
        self.user.base()
    }

    pub fn server_addr(&self) -> ExpResult<SocketAddr> {
        let hostport = self.server_url().trim_start_matches("http://").trim_start_matches("https://");
        let hostport = hostport.split('/').next().unwrap_or(hostport);
        hostport
            .to_socket_addrs()
            .ok()
            .and_then(|mut a| a.next())
            .ok_or_else(|| ExpError(format!("cannot resolve server address {hostport}")))
    }

    pub fn name(&self, base: &str) -> String {
        format!("{base}-{}", self.tag)
    }

    /// An agent configuration on the simulated scheduler with short loop
    /// intervals.
    pub fn agent_config(&self, agent_id: &str, slots: usize, plan: FaultPlan) -> AgentConfig {
        AgentConfig {
            server_url: self.server_url().to_string(),
            api_key: self.agent_key.clone(),
            agent_id: agent_id.to_string(),
            poll_interval_s: 0.05,
            heartbeat_interval_s: 0.5,
            max_slots: slots,
            work_dir: self.work_root.join(agent_id).join("runs"),
            finalise_interval_s: 0.02,
            runner_path: Some(self.binaries.runner.clone()),
            backend: BackendConfig::Simulated(plan),
        }
    }

    pub fn put_device(&self, id: &str, d: &DeviceDescriptor) -> ExpResult<u64> {
        let doc = serde_json::to_value(d).map_err(|e| ExpError(e.to_string()))?;
        Ok(self.admin.put_device(id, &doc)?.0.snapshot_version)
    }

    pub fn submit(&self, device: &str, source: &str, shots: u64, seed: u64) -> ExpResult<TaskRecord> {
        Ok(self.user.submit(&SubmitRequest {
            circuit_source: source.to_string(),
            dialect: vqpu_core::DIALECT_NQASM1.to_string(),
            shots,
            device_id: device.to_string(),
            seed: Some(seed),
        })?)
    }

    /// Polls until every task is terminal.
    pub fn wait_terminal(&self, ids: &[String], timeout: Duration) -> ExpResult<Vec<TaskRecord>> {
        let deadline = Instant::now() + timeout;
        loop {
            let records = ids.iter().map(|id| self.user.task(id)).collect::<Result<Vec<_>, _>>()?;
            if records.iter().all(|r| r.state.is_terminal()) {
                return Ok(records);
            }
            if Instant::now() >= deadline {
                let open = records.iter().filter(|r| !r.state.is_terminal()).count();
                return fail(format!("{open} of {} tasks still not terminal after {timeout:?}", ids.len()));
            }
            thread::sleep(Duration::from_millis(50));
        }
    }

    /// Opens the event stream after the current last sequence.
    pub fn tap(&self) -> ExpResult<EventTap> {
        let from = self.user.health()?.last_sequence;
        Ok(EventTap { rx: self.user.events(Some(from))?, events: Vec::new() })
    }
}

/// A simulated-scheduler plan with fixed delays.
pub fn fixed_plan(seed: u64, capacity: usize, queue_delay_s: f64, run_s: f64, instance: &str) -> FaultPlan {
    FaultPlan {
        seed,
        capacity,
        queue_delay: DelaySpec::Fixed { seconds: queue_delay_s },
        run_duration: DelaySpec::Fixed { seconds: run_s },
        injections: Vec::new(),
        instance: Some(instance.to_string()),
    }
}

/// Accumulates lifecycle events from a live stream.
pub struct EventTap {
    rx: Receiver<SseFrame>,
    pub events: Vec<LifecycleEvent>,
}

impl EventTap {
    /// Drains whatever has arrived, waiting at most `wait` for the first frame.
    pub fn pump(&mut self, wait: Duration) {
        let mut wait = wait;
        loop {
            match self.rx.recv_timeout(wait) {
                Ok(frame) => {
                    if let Some(e) = frame.lifecycle() {
                        self.events.push(e);
                    }
                    wait = Duration::ZERO;
                }
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    }

    /// Pumps until `done` holds over the collected events.
    pub fn wait_for(&mut self, timeout: Duration, done: impl Fn(&[LifecycleEvent]) -> bool) -> ExpResult<()> {
        let deadline = Instant::now() + timeout;
        loop {
            if done(&self.events) {
                return Ok(());
            }
            let now = Instant::now();
            if now >= deadline {
                return fail(format!("expected events did not arrive within {timeout:?}"));
            }
            self.pump((deadline - now).min(Duration::from_millis(100)));
        }
    }

    pub fn for_task<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a LifecycleEvent> + 'a {
        self.events.iter().filter(move |e| e.task_id.as_deref() == Some(id))
    }

    pub fn count(&self, id: &str, kind: EventType) -> usize {
        self.for_task(id).filter(|e| e.event_type == kind).count()
    }

    pub fn first<'a>(&'a self, id: &'a str, kind: EventType) -> Option<&'a LifecycleEvent> {
        self.for_task(id).find(|e| e.event_type == kind)
    }

    pub fn terminal_count(&self, id: &str) -> usize {
        self.for_task(id).filter(|e| e.event_type.resulting_state().is_some_and(|s| s.is_terminal())).count()
    }

    /// Sequence numbers are strictly increasing with no gaps.
    pub fn gap_free(&self) -> bool {
        self.events.windows(2).all(|w| w[1].sequence == w[0].sequence + 1)
    }
}

/// Point mass on the all-zero outcome of `width` bits.
pub fn all_zero(width: usize) -> Distribution {
    BTreeMap::from([("0".repeat(width), 1.0)])
}

/// Total variation distance of a task's counts from `reference`.
pub fn tv_from(record: &TaskRecord, reference: &Distribution) -> ExpResult<f64> {
    let result = record.result.as_ref().ok_or_else(|| ExpError(format!("{} has no result", record.task_id)))?;
    total_variation_distance(&normalize_counts(&result.counts), reference).map_err(|e| ExpError(e.to_string()))
}

pub fn probability(record: &TaskRecord, outcome: &str) -> f64 {
    record.result.as_ref().map_or(0.0, |r| {
        let total: u64 = r.counts.values().sum();
        r.counts.get(outcome).copied().unwrap_or(0) as f64 / total.max(1) as f64
    })
}

pub fn owner_of_claim(e: &LifecycleEvent) -> Option<String> {
    e.payload.get("owner").and_then(Value::as_str).map(str::to_string)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn seconds_between(a: chrono::DateTime<chrono::Utc>, b: chrono::DateTime<chrono::Utc>) -> f64 {
    (b - a).num_microseconds().unwrap_or(i64::MAX) as f64 / 1e6
}
