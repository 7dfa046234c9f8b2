//! The reconciliation controller.
//!
//! Three independent loops share an owned-task table: acquisition claims work
//! while slots are free and hands it to the scheduler, heartbeat reports the
//! owned set, finalisation turns terminal scheduler evidence plus run
//! directory artifacts into exactly one terminal report per task. The table
//! is a cache; after a restart it is rebuilt from the server and the disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::Rng;
use vqpu_core::payload::{
    write_atomic, RunMeta, ERROR_FILE, META_FILE, PAYLOAD_FILE, RESULT_FILE, TIMINGS_FILE,
};
use vqpu_core::task::{AckStatus, ClaimResponse, JobAccounting};
use vqpu_core::{ErrorCode, ErrorEnvelope, ExecutionPayload, ResultArtifact, SimulationResult, Timings};

use crate::client::{ClientError, ControlPlane};
use crate::config::AgentConfig;
use crate::scheduler::{BatchScheduler, ExitClass, JobStatus, RenderedJob, SchedulerError, TerminalRecord, RUNNER_LOG_FILE};

/// Exponential backoff with ±20% jitter.
#[derive(Debug, Clone)]
pub struct Backoff {
    base: Duration,
    cap: Duration,
    attempt: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self::new(Duration::from_secs(1), Duration::from_secs(60))
    }
}

impl Backoff {
    pub fn new(base: Duration, cap: Duration) -> Self {
        Self { base, cap, attempt: 0 }
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }

    pub fn next_delay(&mut self) -> Duration {
        let raw = self.base.saturating_mul(1u32 << self.attempt.min(20)).min(self.cap);
        self.attempt = self.attempt.saturating_add(1);
        raw.mul_f64(rand::rng().random_range(0.8..=1.2))
    }
}

/// The terminal outcome decided for a task, kept until publication succeeds
/// so that retries resend the same outcome.
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Completed(SimulationResult),
    Failed(ErrorEnvelope),
}

#[derive(Debug, Clone)]
pub struct OwnedTask {
    pub task_id: String,
    pub run_dir: PathBuf,
    pub payload: ExecutionPayload,
    pub job_id: Option<String>,
    pub submitted_at: Option<DateTime<Utc>>,
    /// Adopted from a previous incarnation of this agent.
    pub recovered: bool,
    pending: Option<(Verdict, Option<JobAccounting>)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentStats {
    pub claims: u64,
    pub submissions: u64,
    pub completed_reports: u64,
    pub failed_reports: u64,
    /// Terminal reports the server refused because the task had moved on.
    pub absorbed_reports: u64,
    /// Tasks dropped after the server said they are no longer ours.
    pub abandoned: u64,
    pub recovered: u64,
    pub heartbeats: u64,
    pub max_owned: usize,
}

#[derive(Default)]
struct Shared {
    owned: BTreeMap<String, OwnedTask>,
    stats: AgentStats,
    generation: u64,
}

pub struct Agent {
    config: AgentConfig,
    client: ControlPlane,
    scheduler: Arc<dyn BatchScheduler>,
    runner: PathBuf,
    shared: Mutex<Shared>,
    wake: Condvar,
    stopped: AtomicBool,
}

/// Stops a running agent from another thread.
#[derive(Clone)]
pub struct StopHandle(Arc<Agent>);

impl StopHandle {
    pub fn stop(&self) {
        self.0.stop();
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Option<Result<T, String>> {
    match fs::read(path) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes).map_err(|e| e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => Some(Err(e.to_string())),
    }
}

/// Decides a task's outcome from its run directory and, when available, the
/// scheduler's terminal record.
pub fn judge(task: &OwnedTask, record: Option<&TerminalRecord>) -> Verdict {
    let dir = &task.run_dir;
    if let Some(parsed) = read_json::<ResultArtifact>(&dir.join(RESULT_FILE)) {
        let checked = parsed.and_then(|a| a.matches(&task.payload).map(|()| a));
        return match checked {
            Ok(artifact) => {
                let timings = read_json::<Timings>(&dir.join(TIMINGS_FILE)).and_then(Result::ok).unwrap_or_default();
                Verdict::Completed(artifact.into_result(timings))
            }
            Err(why) => Verdict::Failed(ErrorEnvelope::new(
                ErrorCode::ArtifactMalformed,
                format!("{RESULT_FILE} rejected: {why}"),
            )),
        };
    }
    if let Some(parsed) = read_json::<ErrorEnvelope>(&dir.join(ERROR_FILE)) {
        return Verdict::Failed(match parsed {
            Ok(runner) => ErrorEnvelope::new(
                ErrorCode::RunnerException,
                format!("runner failed with {}: {}", runner.code, runner.message),
            )
            .with_detail(serde_json::json!({ "runner_error": runner })),
            Err(why) => ErrorEnvelope::new(ErrorCode::ArtifactMalformed, format!("{ERROR_FILE} unreadable: {why}")),
        });
    }
    let detail = |r: &TerminalRecord| serde_json::json!({ "job_id": r.job_id, "exit_detail": r.exit_detail });
    Verdict::Failed(match record {
        Some(r) if r.exit_class == ExitClass::Killed => {
            ErrorEnvelope::new(ErrorCode::JobKilled, format!("job killed: {}", r.exit_detail)).with_detail(detail(r))
        }
        Some(r) if r.exit_class == ExitClass::NeverStarted => {
            ErrorEnvelope::new(ErrorCode::JobNeverStarted, r.exit_detail.clone()).with_detail(detail(r))
        }
        Some(r) if r.exit_class == ExitClass::Failed => ErrorEnvelope::new(
            ErrorCode::RunnerException,
            format!("runner left no artifact: {}", r.exit_detail),
        )
        .with_detail(detail(r)),
        Some(r) => {
            ErrorEnvelope::new(ErrorCode::ArtifactMissing, format!("{RESULT_FILE} missing after job {} completed", r.job_id))
                .with_detail(detail(r))
        }
        None => ErrorEnvelope::new(ErrorCode::ArtifactMissing, format!("{RESULT_FILE} missing")),
    })
}

impl Agent {
    pub fn new(config: AgentConfig, scheduler: Arc<dyn BatchScheduler>) -> Result<Arc<Self>, ClientError> {
        let client = ControlPlane::new(&config.server_url, &config.api_key, &config.agent_id)?;
        let runner = config.resolved_runner_path();
        Ok(Arc::new(Self {
            config,
            client,
            scheduler,
            runner,
            shared: Mutex::new(Shared::default()),
            wake: Condvar::new(),
            stopped: AtomicBool::new(false),
        }))
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn stop_handle(self: &Arc<Self>) -> StopHandle {
        StopHandle(self.clone())
    }

    pub fn stop(&self) {
        self.stopped.store(true, Ordering::SeqCst);
        let mut s = self.lock();
        s.generation += 1;
        self.wake.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> AgentStats {
        self.lock().stats.clone()
    }

    pub fn owned(&self) -> Vec<OwnedTask> {
        self.lock().owned.values().cloned().collect()
    }

    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn notify(&self) {
        let mut s = self.lock();
        s.generation += 1;
        self.wake.notify_all();
    }

    /// Sleeps up to `d`, returning early on stop or any table change.
    fn pause(&self, d: Duration) {
        let s = self.lock();
        let generation = s.generation;
        let _ = self
            .wake
            .wait_timeout_while(s, d, |s| s.generation == generation && !self.is_stopped())
            .unwrap_or_else(|p| p.into_inner());
    }

    /// Sleeps `d` unless stopped.
    fn sleep(&self, d: Duration) {
        let s = self.lock();
        let _ = self.wake.wait_timeout_while(s, d, |_| !self.is_stopped()).unwrap_or_else(|p| p.into_inner());
    }

    fn drop_task(&self, task_id: &str) {
        let mut s = self.lock();
        s.owned.remove(task_id);
        s.generation += 1;
        self.wake.notify_all();
    }

    /// Runs all loops until [`Agent::stop`] is called.
    pub fn run(self: &Arc<Self>) -> AgentStats {
        let spawn = |name: &str, f: fn(&Agent)| {
            let me = self.clone();
            thread::Builder::new().name(name.into()).spawn(move || f(&me)).expect("spawn agent thread")
        };
        let threads = [
            spawn("heartbeat", Agent::heartbeat_loop),
            spawn("finalise", Agent::finalisation_loop),
            spawn("acquire", |a| {
                a.recover_on_restart();
                a.acquisition_loop()
            }),
            spawn("scheduler", |a| {
                while !a.is_stopped() {
                    a.scheduler.tick();
                    a.sleep(Duration::from_millis(20));
                }
            }),
        ];
        for t in threads {
            let _ = t.join();
        }
        self.stats()
    }

    /// Adopts RUNNING tasks the server attributes to this agent.
    pub fn recover_on_restart(&self) {
        let mut backoff = Backoff::default();
        let tasks = loop {
            if self.is_stopped() {
                return;
            }
            match self.client.owned() {
                Ok(t) => break t,
                Err(e) => {
                    tracing::warn!("recovery query failed: {e}");
                    self.sleep(backoff.next_delay());
                }
            }
        };
        let mut s = self.lock();
        for task in tasks {
            let Some(payload) = task.execution_payload() else { continue };
            let run_dir = self.config.work_dir.join(&task.task_id);
            let meta = read_json::<RunMeta>(&run_dir.join(META_FILE)).and_then(Result::ok);
            tracing::info!(task = %task.task_id, job = ?meta.as_ref().map(|m| &m.scheduler_job_id), "recovered owned task");
            s.owned.insert(
                task.task_id.clone(),
                OwnedTask {
                    task_id: task.task_id,
                    run_dir,
                    payload,
                    job_id: meta.as_ref().map(|m| m.scheduler_job_id.clone()),
                    submitted_at: meta.map(|m| m.submitted_at),
                    recovered: true,
                    pending: None,
                },
            );
            s.stats.recovered += 1;
        }
        s.stats.max_owned = s.stats.max_owned.max(s.owned.len());
        s.generation += 1;
        self.wake.notify_all();
    }

    pub fn acquisition_loop(&self) {
        let mut backoff = Backoff::default();
        while !self.is_stopped() {
            if self.lock().owned.len() >= self.config.max_slots {
                self.pause(self.config.poll_interval());
                continue;
            }
            match self.client.claim() {
                Ok(None) => {
                    backoff.reset();
                    self.sleep(self.config.poll_interval());
                }
                Ok(Some(claim)) => {
                    backoff.reset();
                    self.start(claim);
                }
                Err(e) => {
                    tracing::warn!("claim failed: {e}");
                    self.sleep(backoff.next_delay());
                }
            }
        }
    }

    fn materialise(&self, task_id: &str, payload: &ExecutionPayload) -> std::io::Result<PathBuf> {
        let dir = self.config.work_dir.join(task_id);
        fs::create_dir_all(&dir)?;
        for stale in [RESULT_FILE, ERROR_FILE, META_FILE, TIMINGS_FILE, RUNNER_LOG_FILE] {
            match fs::remove_file(dir.join(stale)) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e),
                _ => {}
            }
        }
        write_atomic(&dir.join(PAYLOAD_FILE), &payload.to_json())?;
        Ok(dir)
    }

    fn start(&self, claim: ClaimResponse) {
        let task_id = claim.task.task_id.clone();
        let payload = claim.payload;
        let run_dir = self.config.work_dir.join(&task_id);
        {
            let mut s = self.lock();
            s.stats.claims += 1;
            s.owned.insert(
                task_id.clone(),
                OwnedTask {
                    task_id: task_id.clone(),
                    run_dir: run_dir.clone(),
                    payload: payload.clone(),
                    job_id: None,
                    submitted_at: None,
                    recovered: false,
                    pending: None,
                },
            );
            s.stats.max_owned = s.stats.max_owned.max(s.owned.len());
        }
        let submitted = self
            .materialise(&task_id, &payload)
            .map_err(|e| SchedulerError::SubmitRejected(format!("cannot materialise run directory: {e}")))
            .and_then(|dir| self.scheduler.submit(RenderedJob::runner(&task_id, &dir, &self.runner)));
        let job_id = match submitted {
            Ok(id) => id,
            Err(e) => {
                tracing::warn!(task = %task_id, "submission failed: {e}");
                if let Some(t) = self.lock().owned.get_mut(&task_id) {
                    t.pending = Some((Verdict::Failed(e.to_envelope()), None));
                }
                self.notify();
                return;
            }
        };
        let now = Utc::now();
        let meta = RunMeta { scheduler_job_id: job_id.clone(), submitted_at: now };
        if let Err(e) = write_atomic(&run_dir.join(META_FILE), &serde_json::to_vec_pretty(&meta).expect("meta serializes")) {
            tracing::warn!(task = %task_id, "cannot write {META_FILE}: {e}");
        }
        {
            let mut s = self.lock();
            s.stats.submissions += 1;
            if let Some(t) = s.owned.get_mut(&task_id) {
                t.job_id = Some(job_id.clone());
                t.submitted_at = Some(now);
            }
        }
        let mut backoff = Backoff::default();
        loop {
            match self.client.report_running(&task_id, &job_id) {
                Ok(_) => break,
                Err(e) if e.is_transient() && !self.is_stopped() => {
                    tracing::warn!(task = %task_id, "report_running failed: {e}");
                    self.sleep(backoff.next_delay());
                }
                Err(e) if e.is_transient() => break,
                Err(e) => {
                    tracing::warn!(task = %task_id, "server refused report_running, abandoning: {e}");
                    self.lock().stats.abandoned += 1;
                    self.drop_task(&task_id);
                    break;
                }
            }
        }
    }

    pub fn heartbeat_loop(&self) {
        while !self.is_stopped() {
            let ids: Vec<String> = self.lock().owned.keys().cloned().collect();
            match self.client.heartbeat(ids) {
                Ok(acks) => {
                    self.lock().stats.heartbeats += 1;
                    for ack in acks.into_iter().filter(|a| a.status != AckStatus::Ok) {
                        tracing::warn!(task = %ack.task_id, status = ?ack.status, "task no longer ours, abandoning");
                        let present = self.lock().owned.contains_key(&ack.task_id);
                        if present {
                            self.lock().stats.abandoned += 1;
                            self.drop_task(&ack.task_id);
                        }
                    }
                }
                Err(e) => tracing::warn!("heartbeat failed: {e}"),
            }
            self.sleep(self.config.heartbeat_interval());
        }
    }

    /// Decides the outcome of `task` if its evidence is final.
    fn inspect(&self, task: &OwnedTask) -> Option<(Verdict, Option<JobAccounting>)> {
        let without_scheduler = || {
            let dir = &task.run_dir;
            (dir.join(RESULT_FILE).exists() || dir.join(ERROR_FILE).exists()).then(|| (judge(task, None), None))
        };
        match &task.job_id {
            Some(job) => match self.scheduler.query_terminal(job) {
                Ok(JobStatus::Active) => None,
                Ok(JobStatus::Terminal(rec)) => {
                    let accounting = JobAccounting {
                        job_id: rec.job_id.clone(),
                        exit_class: rec.exit_class.as_str().to_string(),
                        submitted_at: task.submitted_at,
                        started_at: rec.started_at,
                        ended_at: rec.ended_at,
                    };
                    Some((judge(task, Some(&rec)), Some(accounting)))
                }
                Err(_) => without_scheduler(),
            },
            None if task.recovered => without_scheduler(),
            None => None,
        }
    }

    /// One pass over the owned table. Returns whether a publication hit a
    /// transient error.
    pub fn finalise_once(&self) -> bool {
        let tasks: Vec<OwnedTask> = self.lock().owned.values().cloned().collect();
        let mut transient = false;
        for task in tasks {
            let decided = match task.pending.clone() {
                Some(p) => Some(p),
                None => self.inspect(&task),
            };
            let Some((verdict, accounting)) = decided else { continue };
            if let Some(t) = self.lock().owned.get_mut(&task.task_id) {
                t.pending = Some((verdict.clone(), accounting.clone()));
            } else {
                continue;
            }
            let completed = matches!(verdict, Verdict::Completed(_));
            let sent = match verdict {
                Verdict::Completed(result) => self.client.report_completed(&task.task_id, result, accounting),
                Verdict::Failed(error) => self.client.report_failed(&task.task_id, error, accounting),
            };
            match sent {
                Ok(_) => {
                    let mut s = self.lock();
                    if completed {
                        s.stats.completed_reports += 1;
                    } else {
                        s.stats.failed_reports += 1;
                    }
                    drop(s);
                    self.drop_task(&task.task_id);
                }
                Err(e) if e.is_transient() => {
                    tracing::warn!(task = %task.task_id, "terminal report failed, will retry: {e}");
                    transient = true;
                }
                Err(e) => {
                    tracing::info!(task = %task.task_id, "terminal report refused, treating as finalised: {e}");
                    self.lock().stats.absorbed_reports += 1;
                    self.drop_task(&task.task_id);
                }
            }
        }
        transient
    }

    pub fn finalisation_loop(&self) {
        let mut backoff = Backoff::default();
        while !self.is_stopped() {
            if self.finalise_once() {
                self.sleep(backoff.next_delay());
            } else {
                backoff.reset();
                self.pause(self.config.finalise_interval());
            }
        }
    }
}
