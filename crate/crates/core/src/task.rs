//! Task records, the lifecycle automaton, events and the agent protocol messages.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::circuit::DIALECT_NQASM1;
use crate::device::DeviceSnapshot;
use crate::error::ErrorEnvelope;
use crate::payload::ExecutionPayload;
use crate::sim::SimulationResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Queued,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl TaskState {
    pub const ALL: [TaskState; 5] = [
        TaskState::Queued,
        TaskState::Running,
        TaskState::Completed,
        TaskState::Failed,
        TaskState::Cancelled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Completed | TaskState::Failed | TaskState::Cancelled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Queued => "QUEUED",
            TaskState::Running => "RUNNING",
            TaskState::Completed => "COMPLETED",
            TaskState::Failed => "FAILED",
            TaskState::Cancelled => "CANCELLED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The operations that move a task between states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Claim,
    Complete,
    Fail,
    Cancel,
    Requeue,
    ForceFail,
}

impl Transition {
    /// Target state of this transition from `from`, if the edge exists.
    pub fn target(self, from: TaskState) -> Option<TaskState> {
        use TaskState::*;
        match (self, from) {
            (Transition::Claim, Queued) => Some(Running),
            (Transition::Complete, Running) => Some(Completed),
            (Transition::Fail, Running) => Some(Failed),
            (Transition::Cancel, Queued | Running) => Some(Cancelled),
            (Transition::Requeue, Running) => Some(Queued),
            (Transition::ForceFail, Queued | Running) => Some(Failed),
            _ => None,
        }
    }
}

/// Every `(from, to)` edge of the lifecycle automaton.
pub const LEGAL_EDGES: [(TaskState, TaskState); 7] = [
    (TaskState::Queued, TaskState::Running),
    (TaskState::Running, TaskState::Completed),
    (TaskState::Running, TaskState::Failed),
    (TaskState::Queued, TaskState::Cancelled),
    (TaskState::Running, TaskState::Cancelled),
    (TaskState::Running, TaskState::Queued),
    (TaskState::Queued, TaskState::Failed),
];

/// Scheduler accounting attached by the agent at finalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobAccounting {
    pub job_id: String,
    pub exit_class: String,
    pub submitted_at: Option<DateTime<Utc>>,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub circuit_source: String,
    pub dialect: String,
    pub shots: u64,
    pub device_id: String,
    pub seed: u64,
    pub submitted_by: String,
    pub state: TaskState,
    pub owner: Option<String>,
    pub bound_snapshot: Option<DeviceSnapshot>,
    pub scheduler_job_id: Option<String>,
    pub last_heartbeat_at: Option<DateTime<Utc>>,
    pub created_at: DateTime<Utc>,
    pub claimed_at: Option<DateTime<Utc>>,
    pub terminal_at: Option<DateTime<Utc>>,
    pub result: Option<SimulationResult>,
    pub error: Option<ErrorEnvelope>,
    #[serde(default)]
    pub accounting: Option<JobAccounting>,
}

impl TaskRecord {
    /// Checks the record-level invariants; returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.owner.is_some() != self.claimed_at.is_some() {
            return Err("owner set iff claimed_at set".into());
        }
        if self.bound_snapshot.is_some() && self.claimed_at.is_none() {
            return Err("bound_snapshot requires claimed_at".into());
        }
        let has_outcome = self.result.is_some() as u8 + self.error.is_some() as u8;
        match self.state {
            TaskState::Completed if self.result.is_none() || self.error.is_some() => {
                Err("COMPLETED requires exactly a result".into())
            }
            TaskState::Failed if self.error.is_none() || self.result.is_some() => {
                Err("FAILED requires exactly an error".into())
            }
            TaskState::Queued | TaskState::Running | TaskState::Cancelled if has_outcome != 0 => {
                Err(format!("{} must not carry an outcome", self.state))
            }
            TaskState::Running if self.owner.is_none() || self.bound_snapshot.is_none() => {
                Err("RUNNING requires owner and bound snapshot".into())
            }
            TaskState::Queued if self.owner.is_some() => Err("QUEUED must be unowned".into()),
            _ => Ok(()),
        }
    }

    pub fn execution_payload(&self) -> Option<ExecutionPayload> {
        Some(ExecutionPayload {
            task_id: self.task_id.clone(),
            circuit_source: self.circuit_source.clone(),
            dialect: self.dialect.clone(),
            shots: self.shots,
            seed: self.seed,
            bound_snapshot: self.bound_snapshot.clone()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventType {
    TaskQueued,
    TaskRunning,
    TaskCompleted,
    TaskFailed,
    TaskCancelled,
    TaskRequeued,
    DeviceUpdated,
}

impl EventType {
    pub fn as_str(self) -> &'static str {
        match self {
            EventType::TaskQueued => "TASK_QUEUED",
            EventType::TaskRunning => "TASK_RUNNING",
            EventType::TaskCompleted => "TASK_COMPLETED",
            EventType::TaskFailed => "TASK_FAILED",
            EventType::TaskCancelled => "TASK_CANCELLED",
            EventType::TaskRequeued => "TASK_REQUEUED",
            EventType::DeviceUpdated => "DEVICE_UPDATED",
        }
    }

    /// State a task is in after this event, for task events.
    pub fn resulting_state(self) -> Option<TaskState> {
        match self {
            EventType::TaskQueued | EventType::TaskRequeued => Some(TaskState::Queued),
            EventType::TaskRunning => Some(TaskState::Running),
            EventType::TaskCompleted => Some(TaskState::Completed),
            EventType::TaskFailed => Some(TaskState::Failed),
            EventType::TaskCancelled => Some(TaskState::Cancelled),
            EventType::DeviceUpdated => None,
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub sequence: u64,
    pub event_type: EventType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
    pub timestamp: DateTime<Utc>,
    pub payload: serde_json::Value,
}

// ---- HTTP request/response bodies ----

fn default_dialect() -> String {
    DIALECT_NQASM1.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub circuit_source: String,
    #[serde(default = "default_dialect")]
    pub dialect: String,
    pub shots: u64,
    pub device_id: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViabilityVerdict {
    pub admissible: bool,
    pub device_id: String,
    pub snapshot_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<crate::error::ErrorCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRequest {
    pub agent_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimResponse {
    pub task: TaskRecord,
    pub payload: ExecutionPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRunningRequest {
    pub agent_id: String,
    pub scheduler_job_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCompletedRequest {
    pub agent_id: String,
    pub result: SimulationResult,
    #[serde(default)]
    pub accounting: Option<JobAccounting>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFailedRequest {
    pub agent_id: String,
    pub error: ErrorEnvelope,
    #[serde(default)]
    pub accounting: Option<JobAccounting>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatRequest {
    pub agent_id: String,
    pub task_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AckStatus {
    Ok,
    NotOwner,
    IllegalState,
    UnknownTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatAck {
    pub task_id: String,
    pub status: AckStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatResponse {
    pub acks: Vec<HeartbeatAck>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForceFailRequest {
    #[serde(default)]
    pub message: Option<String>,
}

/// Liveness and policy knobs reported by `GET /health`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub status: String,
    pub cache_ttl_s: f64,
    pub liveness_window_s: f64,
    pub last_sequence: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub invalidations: u64,
}
