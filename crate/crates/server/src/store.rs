//! The authoritative task store. Every mutation runs under one mutex, which is
//! also where events are appended, so the event log order is the commit order.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use vqpu_core::clock::Clock;
use vqpu_core::task::{AckStatus, HeartbeatAck, JobAccounting, Transition};
use vqpu_core::{DeviceSnapshot, ErrorCode, ErrorEnvelope, EventType, SimulationResult, TaskRecord, TaskState};

use crate::events::EventHub;
use crate::journal::{Entry, Journal, LineLog, Recovered};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LifecycleError {
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("task '{task_id}' is owned by another agent")]
    NotOwner { task_id: String },
    #[error("cannot {op} task '{task_id}' in state {from}")]
    IllegalTransition { task_id: String, from: TaskState, op: &'static str },
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    InvalidRequest(String),
    #[error("store write failed: {0}")]
    Store(String),
}

impl LifecycleError {
    pub fn code(&self) -> ErrorCode {
        match self {
            LifecycleError::UnknownTask(_) => ErrorCode::UnknownTask,
            LifecycleError::NotOwner { .. } => ErrorCode::NotOwner,
            LifecycleError::IllegalTransition { .. } => ErrorCode::IllegalTransition,
            LifecycleError::Forbidden(_) => ErrorCode::Forbidden,
            LifecycleError::InvalidRequest(_) => ErrorCode::InvalidRequest,
            LifecycleError::Store(_) => ErrorCode::StoreError,
        }
    }

    pub fn to_envelope(&self) -> ErrorEnvelope {
        let env = ErrorEnvelope::new(self.code(), self.to_string());
        match self {
            LifecycleError::IllegalTransition { task_id, from, op } => {
                env.with_detail(serde_json::json!({ "task_id": task_id, "state": from, "operation": op }))
            }
            LifecycleError::NotOwner { task_id } | LifecycleError::UnknownTask(task_id) => {
                env.with_detail(serde_json::json!({ "task_id": task_id }))
            }
            _ => env,
        }
    }
}

/// Fields supplied at admission.
#[derive(Debug, Clone)]
pub struct NewTask {
    pub circuit_source: String,
    pub dialect: String,
    pub shots: u64,
    pub device_id: String,
    pub seed: u64,
    pub submitted_by: String,
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Completed(SimulationResult),
    Failed(ErrorEnvelope),
}

/// A rejected terminal report, kept as evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub task_id: String,
    pub agent_id: String,
    pub at: DateTime<Utc>,
    pub state: Option<TaskState>,
    pub rejected_with: ErrorCode,
    pub reported: String,
}

#[derive(Debug, Clone, Default)]
pub struct TaskFilter {
    pub state: Option<TaskState>,
    pub device_id: Option<String>,
    pub owner: Option<String>,
}

#[derive(Default)]
struct Inner {
    tasks: HashMap<String, TaskRecord>,
    queued: BTreeSet<(DateTime<Utc>, String)>,
    audit: Vec<AuditEntry>,
}

pub struct TaskStore {
    inner: Mutex<Inner>,
    events: Arc<EventHub>,
    clock: Arc<dyn Clock>,
    journal: Option<Arc<Journal>>,
    audit_log: Option<LineLog>,
    work_available: Notify,
}

impl TaskStore {
    pub fn new(clock: Arc<dyn Clock>, events: Arc<EventHub>) -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            events,
            clock,
            journal: None,
            audit_log: None,
            work_available: Notify::new(),
        }
    }

    pub fn with_journal(mut self, journal: Arc<Journal>, recovered: &Recovered) -> Self {
        let inner = self.inner.get_mut().unwrap();
        for (id, rec) in &recovered.tasks {
            if rec.state == TaskState::Queued {
                inner.queued.insert((rec.created_at, id.clone()));
            }
            inner.tasks.insert(id.clone(), rec.clone());
        }
        self.journal = Some(journal);
        self
    }

    pub fn with_audit_log(mut self, log: LineLog) -> Self {
        self.audit_log = Some(log);
        self
    }

    pub fn events(&self) -> &Arc<EventHub> {
        &self.events
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    /// Resolves when a task may have become claimable.
    pub fn work_available(&self) -> &Notify {
        &self.work_available
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn persist(&self, rec: &TaskRecord) -> Result<(), LifecycleError> {
        debug_assert_eq!(rec.check_invariants(), Ok(()), "{rec:?}");
        match &self.journal {
            Some(j) => j.append(&Entry::Task(Box::new(rec.clone()))).map_err(|e| LifecycleError::Store(e.to_string())),
            None => Ok(()),
        }
    }

    /// Writes `rec` back, keeps the queue index in step, and appends `event`.
    fn commit(
        &self,
        inner: &mut Inner,
        before: Option<TaskState>,
        rec: TaskRecord,
        event: EventType,
        payload: serde_json::Value,
    ) -> Result<TaskRecord, LifecycleError> {
        self.persist(&rec)?;
        if before == Some(TaskState::Queued) {
            inner.queued.remove(&(rec.created_at, rec.task_id.clone()));
        }
        if rec.state == TaskState::Queued {
            inner.queued.insert((rec.created_at, rec.task_id.clone()));
        }
        self.events.publish(event, Some(&rec.task_id), Some(&rec.device_id), payload);
        inner.tasks.insert(rec.task_id.clone(), rec.clone());
        Ok(rec)
    }

    fn get_locked<'a>(inner: &'a Inner, task_id: &str) -> Result<&'a TaskRecord, LifecycleError> {
        inner.tasks.get(task_id).ok_or_else(|| LifecycleError::UnknownTask(task_id.to_string()))
    }

    fn illegal(rec: &TaskRecord, op: &'static str) -> LifecycleError {
        LifecycleError::IllegalTransition { task_id: rec.task_id.clone(), from: rec.state, op }
    }

    pub fn enqueue(&self, new: NewTask) -> Result<TaskRecord, LifecycleError> {
        if new.shots == 0 {
            return Err(LifecycleError::InvalidRequest("shots must be positive".into()));
        }
        let mut inner = self.lock();
        let now = self.clock.now();
        let rec = TaskRecord {
            task_id: uuid::Uuid::new_v4().to_string(),
            circuit_source: new.circuit_source,
            dialect: new.dialect,
            shots: new.shots,
            device_id: new.device_id,
            seed: new.seed,
            submitted_by: new.submitted_by,
            state: TaskState::Queued,
            owner: None,
            bound_snapshot: None,
            scheduler_job_id: None,
            last_heartbeat_at: None,
            created_at: now,
            claimed_at: None,
            terminal_at: None,
            result: None,
            error: None,
            accounting: None,
        };
        let payload = serde_json::json!({
            "state": TaskState::Queued,
            "shots": rec.shots,
            "submitted_by": rec.submitted_by,
        });
        let rec = self.commit(&mut inner, None, rec, EventType::TaskQueued, payload)?;
        drop(inner);
        self.work_available.notify_waiters();
        Ok(rec)
    }

    /// Atomically hands the oldest queued task to `agent_id`, binding the
    /// snapshot `authoritative` returns for its device at this instant. A task
    /// whose device no longer exists is failed with DEVICE_UNAVAILABLE and the
    /// search continues.
    pub fn claim(
        &self,
        agent_id: &str,
        authoritative: &dyn Fn(&str) -> Option<DeviceSnapshot>,
    ) -> Result<Option<(TaskRecord, DeviceSnapshot)>, LifecycleError> {
        if agent_id.trim().is_empty() {
            return Err(LifecycleError::InvalidRequest("agent_id must be non-empty".into()));
        }
        let mut inner = self.lock();
        while let Some((_, task_id)) = inner.queued.first().cloned() {
            let mut rec = inner.tasks[&task_id].clone();
            if rec.state != TaskState::Queued {
                inner.queued.pop_first();
                continue;
            }
            let now = self.clock.now();
            let Some(snapshot) = authoritative(&rec.device_id) else {
                rec.state = TaskState::Failed;
                rec.terminal_at = Some(now);
                rec.error = Some(
                    ErrorEnvelope::new(
                        ErrorCode::DeviceUnavailable,
                        format!("device '{}' was removed before the task was claimed", rec.device_id),
                    )
                    .with_detail(serde_json::json!({ "device_id": rec.device_id })),
                );
                let payload = serde_json::json!({ "state": TaskState::Failed, "code": ErrorCode::DeviceUnavailable });
                self.commit(&mut inner, Some(TaskState::Queued), rec, EventType::TaskFailed, payload)?;
                continue;
            };
            rec.state = TaskState::Running;
            rec.owner = Some(agent_id.to_string());
            rec.claimed_at = Some(now);
            rec.last_heartbeat_at = Some(now);
            rec.bound_snapshot = Some(snapshot.clone());
            let payload = serde_json::json!({
                "state": TaskState::Running,
                "owner": agent_id,
                "snapshot_version": snapshot.snapshot_version,
            });
            let rec = self.commit(&mut inner, Some(TaskState::Queued), rec, EventType::TaskRunning, payload)?;
            return Ok(Some((rec, snapshot)));
        }
        Ok(None)
    }

    fn owned_running<'a>(
        inner: &'a Inner,
        task_id: &str,
        agent_id: &str,
        op: &'static str,
    ) -> Result<&'a TaskRecord, LifecycleError> {
        let rec = Self::get_locked(inner, task_id)?;
        if rec.state != TaskState::Running {
            return Err(Self::illegal(rec, op));
        }
        if rec.owner.as_deref() != Some(agent_id) {
            return Err(LifecycleError::NotOwner { task_id: task_id.to_string() });
        }
        Ok(rec)
    }

    pub fn report_running(
        &self,
        task_id: &str,
        agent_id: &str,
        scheduler_job_id: &str,
    ) -> Result<TaskRecord, LifecycleError> {
        let mut inner = self.lock();
        let mut rec = Self::owned_running(&inner, task_id, agent_id, "report running for")?.clone();
        rec.scheduler_job_id = Some(scheduler_job_id.to_string());
        rec.last_heartbeat_at = Some(self.clock.now());
        self.persist(&rec)?;
        inner.tasks.insert(rec.task_id.clone(), rec.clone());
        Ok(rec)
    }

    /// Commits the single terminal outcome of a running task. Any report that
    /// cannot commit is written to the audit log before being rejected.
    pub fn report_terminal(
        &self,
        task_id: &str,
        agent_id: &str,
        outcome: Outcome,
        accounting: Option<JobAccounting>,
    ) -> Result<TaskRecord, LifecycleError> {
        let mut inner = self.lock();
        let checked = Self::owned_running(&inner, task_id, agent_id, "report terminal outcome for").cloned();
        let mut rec = match checked {
            Ok(rec) => rec,
            Err(err) => {
                let entry = AuditEntry {
                    task_id: task_id.to_string(),
                    agent_id: agent_id.to_string(),
                    at: self.clock.now(),
                    state: inner.tasks.get(task_id).map(|r| r.state),
                    rejected_with: err.code(),
                    reported: match &outcome {
                        Outcome::Completed(_) => "COMPLETED".into(),
                        Outcome::Failed(e) => format!("FAILED({})", e.code),
                    },
                };
                if let Some(log) = &self.audit_log {
                    if let Err(e) = log.append(&entry) {
                        tracing::error!("audit log append failed: {e}");
                    }
                }
                inner.audit.push(entry);
                return Err(err);
            }
        };
        rec.terminal_at = Some(self.clock.now());
        rec.accounting = accounting;
        let (event, payload) = match outcome {
            Outcome::Completed(result) => {
                rec.state = TaskState::Completed;
                rec.result = Some(result);
                (EventType::TaskCompleted, serde_json::json!({ "state": TaskState::Completed, "owner": agent_id }))
            }
            Outcome::Failed(error) => {
                rec.state = TaskState::Failed;
                let code = error.code;
                rec.error = Some(error);
                (
                    EventType::TaskFailed,
                    serde_json::json!({ "state": TaskState::Failed, "owner": agent_id, "code": code }),
                )
            }
        };
        self.commit(&mut inner, Some(TaskState::Running), rec, event, payload)
    }

    pub fn heartbeat(&self, agent_id: &str, task_ids: &[String]) -> Result<Vec<HeartbeatAck>, LifecycleError> {
        let mut inner = self.lock();
        let now = self.clock.now();
        let mut acks = Vec::with_capacity(task_ids.len());
        for id in task_ids {
            let status = match inner.tasks.get(id) {
                None => AckStatus::UnknownTask,
                Some(r) if r.owner.as_deref() != Some(agent_id) => AckStatus::NotOwner,
                Some(r) if r.state != TaskState::Running => AckStatus::IllegalState,
                Some(r) => {
                    let mut r = r.clone();
                    r.last_heartbeat_at = Some(now);
                    self.persist(&r)?;
                    inner.tasks.insert(id.clone(), r);
                    AckStatus::Ok
                }
            };
            acks.push(HeartbeatAck { task_id: id.clone(), status });
        }
        Ok(acks)
    }

    /// RUNNING → QUEUED, clearing ownership and the bound snapshot.
    pub fn requeue(&self, task_id: &str, admin: &str) -> Result<TaskRecord, LifecycleError> {
        let mut inner = self.lock();
        let mut rec = Self::get_locked(&inner, task_id)?.clone();
        if Transition::Requeue.target(rec.state).is_none() {
            return Err(Self::illegal(&rec, "requeue"));
        }
        let previous_owner = rec.owner.take();
        rec.state = TaskState::Queued;
        rec.bound_snapshot = None;
        rec.claimed_at = None;
        rec.scheduler_job_id = None;
        rec.last_heartbeat_at = None;
        let payload = serde_json::json!({
            "state": TaskState::Queued,
            "previous_owner": previous_owner,
            "by": admin,
        });
        let rec = self.commit(&mut inner, Some(TaskState::Running), rec, EventType::TaskRequeued, payload)?;
        drop(inner);
        self.work_available.notify_waiters();
        Ok(rec)
    }

    /// Cancels a non-terminal task. Only the submitter or an admin may do so.
    pub fn cancel(&self, task_id: &str, caller: &str, is_admin: bool) -> Result<TaskRecord, LifecycleError> {
        let mut inner = self.lock();
        let mut rec = Self::get_locked(&inner, task_id)?.clone();
        if !is_admin && rec.submitted_by != caller {
            return Err(LifecycleError::Forbidden(format!("'{caller}' did not submit task '{task_id}'")));
        }
        if Transition::Cancel.target(rec.state).is_none() {
            return Err(Self::illegal(&rec, "cancel"));
        }
        let before = rec.state;
        rec.state = TaskState::Cancelled;
        rec.terminal_at = Some(self.clock.now());
        let payload = serde_json::json!({ "state": TaskState::Cancelled, "by": caller });
        self.commit(&mut inner, Some(before), rec, EventType::TaskCancelled, payload)
    }

    pub fn force_fail(&self, task_id: &str, admin: &str, message: Option<String>) -> Result<TaskRecord, LifecycleError> {
        let mut inner = self.lock();
        let mut rec = Self::get_locked(&inner, task_id)?.clone();
        if Transition::ForceFail.target(rec.state).is_none() {
            return Err(Self::illegal(&rec, "force-fail"));
        }
        let before = rec.state;
        rec.state = TaskState::Failed;
        rec.terminal_at = Some(self.clock.now());
        rec.error = Some(
            ErrorEnvelope::new(
                ErrorCode::ForceFailed,
                message.unwrap_or_else(|| format!("force-failed by {admin}")),
            )
            .with_detail(serde_json::json!({ "by": admin, "previous_state": before })),
        );
        let payload = serde_json::json!({ "state": TaskState::Failed, "code": ErrorCode::ForceFailed, "by": admin });
        self.commit(&mut inner, Some(before), rec, EventType::TaskFailed, payload)
    }

    pub fn get(&self, task_id: &str) -> Result<TaskRecord, LifecycleError> {
        Self::get_locked(&self.lock(), task_id).cloned()
    }

    /// Matching tasks ordered by creation time, then id.
    pub fn list(&self, filter: &TaskFilter) -> Vec<TaskRecord> {
        let inner = self.lock();
        let mut out: Vec<TaskRecord> = inner
            .tasks
            .values()
            .filter(|r| filter.state.is_none_or(|s| r.state == s))
            .filter(|r| filter.device_id.as_deref().is_none_or(|d| r.device_id == d))
            .filter(|r| filter.owner.as_deref().is_none_or(|o| r.owner.as_deref() == Some(o)))
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.created_at, &a.task_id).cmp(&(b.created_at, &b.task_id)));
        out
    }

    /// RUNNING tasks whose last heartbeat is older than `window`. Read-only.
    pub fn stale(&self, window: Duration) -> Vec<TaskRecord> {
        let now = self.clock.now();
        let mut out: Vec<TaskRecord> = self
            .lock()
            .tasks
            .values()
            .filter(|r| r.state == TaskState::Running)
            .filter(|r| r.last_heartbeat_at.is_none_or(|hb| now - hb > window))
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.created_at, &a.task_id).cmp(&(b.created_at, &b.task_id)));
        out
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.lock().audit.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
