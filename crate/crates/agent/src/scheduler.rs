//! The scheduler boundary: submit a rendered job, observe the active set,
//! query terminal evidence.
//!
//! Both backends share one event-driven engine. Time comes from a [`Clock`],
//! so with a [`ManualClock`](vqpu_core::clock::ManualClock) and the
//! [`InProcessExecutor`] every start, end and exit class is reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vqpu_core::clock::{Clock, SystemClock};
use vqpu_core::payload::{PAYLOAD_FILE, RESULT_FILE, TIMINGS_FILE};
use vqpu_core::{ErrorCode, ErrorEnvelope};

use crate::config::{DelaySpec, Fault, FaultPlan};

pub const RUNNER_LOG_FILE: &str = "runner.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceHint {
    pub slots: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedJob {
    pub job_name: String,
    pub run_directory: PathBuf,
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub resource_hint: ResourceHint,
}

impl RenderedJob {
    /// A job that runs `runner` on `run_directory`.
    pub fn runner(task_id: &str, run_directory: &Path, runner: &Path) -> Self {
        Self {
            job_name: format!("vqpu-{task_id}"),
            run_directory: run_directory.to_path_buf(),
            command: vec![runner.display().to_string(), run_directory.display().to_string()],
            resource_hint: ResourceHint { slots: 1 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExitClass {
    Completed,
    Failed,
    NeverStarted,
    Killed,
}

impl ExitClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitClass::Completed => "COMPLETED",
            ExitClass::Failed => "FAILED",
            ExitClass::NeverStarted => "NEVER_STARTED",
            ExitClass::Killed => "KILLED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminalRecord {
    pub job_id: String,
    pub exit_class: ExitClass,
    pub exit_detail: String,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JobStatus {
    Active,
    Terminal(TerminalRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchedulerError {
    #[error("submission rejected: {0}")]
    SubmitRejected(String),
    #[error("unknown job '{0}'")]
    UnknownJob(String),
}

impl SchedulerError {
    pub fn to_envelope(&self) -> ErrorEnvelope {
        let code = match self {
            SchedulerError::SubmitRejected(_) => ErrorCode::SubmitRejected,
            SchedulerError::UnknownJob(_) => ErrorCode::UnknownJob,
        };
        ErrorEnvelope::new(code, self.to_string())
    }
}

pub trait BatchScheduler: Send + Sync {
    fn submit(&self, job: RenderedJob) -> Result<String, SchedulerError>;
    /// Jobs currently queued or running.
    fn observe_active(&self) -> BTreeSet<String>;
    fn query_terminal(&self, job_id: &str) -> Result<JobStatus, SchedulerError>;
    /// Brings internal state up to the clock's current time.
    fn tick(&self);
}

/// A started job's process, however it is realised.
pub trait Execution: Send {
    /// Exit status once finished.
    fn try_wait(&mut self) -> io::Result<Option<i32>>;
    fn kill(&mut self);
}

pub trait Executor: Send + Sync {
    fn launch(&self, job: &RenderedJob) -> io::Result<Box<dyn Execution>>;
}

/// Runs the job's command as a child process, output to `runner.log`.
#[derive(Debug, Default, Clone, Copy)]
pub struct ProcessExecutor;

struct ChildExecution(Child);

impl Execution for ChildExecution {
    fn try_wait(&mut self) -> io::Result<Option<i32>> {
        Ok(self.0.try_wait()?.map(|s| s.code().unwrap_or(-1)))
    }

    fn kill(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

impl Executor for ProcessExecutor {
    fn launch(&self, job: &RenderedJob) -> io::Result<Box<dyn Execution>> {
        let (program, args) = job
            .command
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
        let log = fs::File::create(job.run_directory.join(RUNNER_LOG_FILE))?;
        let child = Command::new(program)
            .args(args)
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .spawn()?;
        Ok(Box::new(ChildExecution(child)))
    }
}

/// Evaluates the run directory with the runner library on the calling
/// thread. The job's command is not consulted. Meant for deterministic
/// virtual-clock tests.
#[derive(Debug, Default, Clone, Copy)]
pub struct InProcessExecutor {
    pub config: vqpu_runner::RunnerConfig,
}

struct Finished(i32);

impl Execution for Finished {
    fn try_wait(&mut self) -> io::Result<Option<i32>> {
        Ok(Some(self.0))
    }

    fn kill(&mut self) {}
}

impl Executor for InProcessExecutor {
    fn launch(&self, job: &RenderedJob) -> io::Result<Box<dyn Execution>> {
        Ok(Box::new(Finished(vqpu_runner::execute(&job.run_directory, self.config))))
    }
}

fn seconds(s: f64) -> Duration {
    Duration::microseconds((s * 1e6).round() as i64)
}

fn sample(spec: DelaySpec, rng: &mut ChaCha8Rng) -> Duration {
    match spec {
        DelaySpec::Fixed { seconds: s } => seconds(s),
        DelaySpec::Uniform { lo, hi } if hi > lo => seconds(rng.random_range(lo..hi)),
        DelaySpec::Uniform { lo, .. } => seconds(lo),
    }
}

enum Phase {
    Queued,
    Running { started: DateTime<Utc>, exec: Box<dyn Execution>, exited: Option<(i32, DateTime<Utc>)> },
    Done(TerminalRecord),
}

struct Job {
    id: String,
    spec: RenderedJob,
    eligible_at: DateTime<Utc>,
    duration: Duration,
    fault: Option<Fault>,
    phase: Phase,
}

struct State {
    jobs: BTreeMap<u64, Job>,
    by_id: HashMap<String, u64>,
    next_ordinal: u64,
    rng: ChaCha8Rng,
    horizon: DateTime<Utc>,
    running: usize,
    max_running: usize,
    history: Vec<TerminalRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Finish,
    Kill,
    NeverStart,
    Start,
}

/// Batch scheduler with a sampled queue delay, slot capacity and injected
/// faults.
pub struct SimulatedScheduler {
    clock: Arc<dyn Clock>,
    executor: Arc<dyn Executor>,
    plan: FaultPlan,
    prefix: String,
    state: Mutex<State>,
}

impl SimulatedScheduler {
    pub fn new(plan: FaultPlan, clock: Arc<dyn Clock>, executor: Arc<dyn Executor>) -> Self {
        let instance = plan.instance.clone().unwrap_or_else(|| format!("{:06x}", rand::random::<u32>() & 0xff_ffff));
        Self::with_prefix(format!("sim-{instance}"), plan, clock, executor)
    }

    fn with_prefix(prefix: String, plan: FaultPlan, clock: Arc<dyn Clock>, executor: Arc<dyn Executor>) -> Self {
        let state = State {
            jobs: BTreeMap::new(),
            by_id: HashMap::new(),
            next_ordinal: 0,
            rng: ChaCha8Rng::seed_from_u64(plan.seed),
            horizon: clock.now(),
            running: 0,
            max_running: 0,
            history: Vec::new(),
        };
        Self { clock, executor, plan, prefix, state: Mutex::new(state) }
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    /// Terminal records in the order jobs left the active set.
    pub fn history(&self) -> Vec<TerminalRecord> {
        self.advance().history.clone()
    }

    /// Largest number of simultaneously running jobs seen so far.
    pub fn max_running(&self) -> usize {
        self.advance().max_running
    }

    pub fn running(&self) -> usize {
        self.advance().running
    }

    fn advance(&self) -> MutexGuard<'_, State> {
        let mut st = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let now = self.clock.now();
        self.run_events(&mut st, now);
        st
    }

    fn run_events(&self, st: &mut State, now: DateTime<Utc>) {
        let mut t = st.horizon.min(now);
        loop {
            for job in st.jobs.values_mut() {
                if let Phase::Running { exec, exited: exited @ None, .. } = &mut job.phase {
                    if let Ok(Some(code)) = exec.try_wait() {
                        *exited = Some((code, now));
                    }
                }
            }
            let mut next: Option<(DateTime<Utc>, EventKind, u64)> = None;
            let mut offer = |cand: (DateTime<Utc>, EventKind, u64)| {
                if cand.0 <= now && next.is_none_or(|n| cand < n) {
                    next = Some(cand);
                }
            };
            let free = st.running < self.plan.capacity;
            for (&ord, job) in &st.jobs {
                match &job.phase {
                    Phase::Queued if job.fault == Some(Fault::NeverStart) => {
                        offer((job.eligible_at, EventKind::NeverStart, ord))
                    }
                    Phase::Queued if free => offer((job.eligible_at.max(t), EventKind::Start, ord)),
                    Phase::Running { started, exited, .. } => {
                        let end = exited.map(|(_, at)| at.max(*started + job.duration));
                        let kill = match job.fault {
                            Some(Fault::KillAfter { seconds: k }) => Some(*started + seconds(k)),
                            _ => None,
                        };
                        match (kill, end) {
                            (Some(k), e) if e.is_none_or(|e| k < e) => offer((k, EventKind::Kill, ord)),
                            (_, Some(e)) => offer((e, EventKind::Finish, ord)),
                            _ => {}
                        }
                    }
                    _ => {}
                }
            }
            let Some((at, kind, ord)) = next else { break };
            t = t.max(at);
            self.apply(st, ord, kind, at);
        }
        st.horizon = now;
    }

    fn apply(&self, st: &mut State, ord: u64, kind: EventKind, at: DateTime<Utc>) {
        let job = st.jobs.get_mut(&ord).expect("event refers to a known job");
        let record = |class: ExitClass, detail: String, started: Option<DateTime<Utc>>| TerminalRecord {
            job_id: job.id.clone(),
            exit_class: class,
            exit_detail: detail,
            started_at: started,
            ended_at: Some(at),
        };
        let done = match kind {
            EventKind::Start => match self.executor.launch(&job.spec) {
                Ok(mut exec) => {
                    let exited = exec.try_wait().ok().flatten().map(|code| (code, at));
                    job.phase = Phase::Running { started: at, exec, exited };
                    st.running += 1;
                    st.max_running = st.max_running.max(st.running);
                    None
                }
                Err(e) => Some(record(ExitClass::Failed, format!("launch failed: {e}"), Some(at))),
            },
            EventKind::NeverStart => {
                Some(record(ExitClass::NeverStarted, "job never started (injected fault)".into(), None))
            }
            EventKind::Kill => {
                let Phase::Running { started, exec, .. } = &mut job.phase else { unreachable!() };
                exec.kill();
                let started = *started;
                for f in [RESULT_FILE, TIMINGS_FILE] {
                    let _ = fs::remove_file(job.spec.run_directory.join(f));
                }
                st.running -= 1;
                let ran = (at - started).as_seconds_f64();
                Some(record(ExitClass::Killed, format!("killed after {ran:.3} s (injected fault)"), Some(started)))
            }
            EventKind::Finish => {
                let Phase::Running { started, exited: Some((code, _)), .. } = &job.phase else { unreachable!() };
                let (started, code) = (*started, *code);
                st.running -= 1;
                let mut detail =
                    if code == 0 { "runner exited with status 0".to_string() } else { format!("runner exited with status {code}") };
                if job.fault == Some(Fault::LoseArtifact) {
                    let _ = fs::remove_file(job.spec.run_directory.join(RESULT_FILE));
                    detail.push_str("; result artifact lost (injected fault)");
                }
                let class = if code == 0 { ExitClass::Completed } else { ExitClass::Failed };
                Some(record(class, detail, Some(started)))
            }
        };
        if let Some(rec) = done {
            st.history.push(rec.clone());
            job.phase = Phase::Done(rec);
        }
    }
}

impl BatchScheduler for SimulatedScheduler {
    fn submit(&self, job: RenderedJob) -> Result<String, SchedulerError> {
        if self.plan.capacity == 0 {
            return Err(SchedulerError::SubmitRejected("scheduler capacity is zero".into()));
        }
        if job.command.is_empty() {
            return Err(SchedulerError::SubmitRejected("empty command".into()));
        }
        if !job.run_directory.join(PAYLOAD_FILE).is_file() {
            return Err(SchedulerError::SubmitRejected(format!(
                "{} has no {PAYLOAD_FILE}",
                job.run_directory.display()
            )));
        }
        let mut st = self.advance();
        let ordinal = st.next_ordinal;
        st.next_ordinal += 1;
        let delay = sample(self.plan.queue_delay, &mut st.rng);
        let duration = sample(self.plan.run_duration, &mut st.rng);
        let fault = self.plan.injections.iter().find(|i| i.matches(ordinal, &job.job_name)).map(|i| i.fault);
        let id = format!("{}-{ordinal}", self.prefix);
        let eligible_at = st.horizon + delay;
        st.by_id.insert(id.clone(), ordinal);
        st.jobs.insert(ordinal, Job { id: id.clone(), spec: job, eligible_at, duration, fault, phase: Phase::Queued });
        let now = st.horizon;
        self.run_events(&mut st, now);
        Ok(id)
    }

    fn observe_active(&self) -> BTreeSet<String> {
        let st = self.advance();
        st.jobs.values().filter(|j| !matches!(j.phase, Phase::Done(_))).map(|j| j.id.clone()).collect()
    }

    fn query_terminal(&self, job_id: &str) -> Result<JobStatus, SchedulerError> {
        let st = self.advance();
        let ord = st.by_id.get(job_id).ok_or_else(|| SchedulerError::UnknownJob(job_id.to_string()))?;
        Ok(match &st.jobs[ord].phase {
            Phase::Done(rec) => JobStatus::Terminal(rec.clone()),
            _ => JobStatus::Active,
        })
    }

    fn tick(&self) {
        drop(self.advance());
    }
}

/// Runs jobs as local processes, at most `slots` at a time, in submission
/// order.
pub struct LocalScheduler(SimulatedScheduler);

impl LocalScheduler {
    pub fn new(slots: usize) -> Self {
        Self::with(slots, Arc::new(SystemClock), Arc::new(ProcessExecutor))
    }

    pub fn with(slots: usize, clock: Arc<dyn Clock>, executor: Arc<dyn Executor>) -> Self {
        let plan = FaultPlan { capacity: slots, ..FaultPlan::default() };
        let prefix = format!("local-{:06x}", rand::random::<u32>() & 0xff_ffff);
        Self(SimulatedScheduler::with_prefix(prefix, plan, clock, executor))
    }

    pub fn max_running(&self) -> usize {
        self.0.max_running()
    }
}

impl BatchScheduler for LocalScheduler {
    fn submit(&self, job: RenderedJob) -> Result<String, SchedulerError> {
        self.0.submit(job)
    }

    fn observe_active(&self) -> BTreeSet<String> {
        self.0.observe_active()
    }

    fn query_terminal(&self, job_id: &str) -> Result<JobStatus, SchedulerError> {
        self.0.query_terminal(job_id)
    }

    fn tick(&self) {
        self.0.tick()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Injection;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use vqpu_core::clock::ManualClock;

    /// Succeeds instantly and counts launches.
    #[derive(Default)]
    struct Instant(AtomicUsize);

    impl Executor for Instant {
        fn launch(&self, job: &RenderedJob) -> io::Result<Box<dyn Execution>> {
            self.0.fetch_add(1, Ordering::SeqCst);
            fs::write(job.run_directory.join(RESULT_FILE), b"{}")?;
            Ok(Box::new(Finished(0)))
        }
    }

    fn job(dir: &Path, name: &str) -> RenderedJob {
        let run = dir.join(name);
        fs::create_dir_all(&run).unwrap();
        fs::write(run.join(PAYLOAD_FILE), b"{}").unwrap();
        RenderedJob::runner(name, &run, Path::new("/bin/true"))
    }

    fn plan(capacity: usize, delay: f64, run: f64) -> FaultPlan {
        FaultPlan {
            seed: 1,
            capacity,
            queue_delay: DelaySpec::Fixed { seconds: delay },
            run_duration: DelaySpec::Fixed { seconds: run },
            injections: vec![],
            instance: Some("t".into()),
        }
    }

    #[test]
    fn queue_delay_then_active_then_complete() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::default());
        let exec = Arc::new(Instant::default());
        let s = SimulatedScheduler::new(plan(1, 2.0, 1.0), clock.clone(), exec.clone());
        let id = s.submit(job(dir.path(), "a")).unwrap();
        assert_eq!(id, "sim-t-0");
        assert_eq!(s.observe_active(), BTreeSet::from([id.clone()]));
        assert_eq!(exec.0.load(Ordering::SeqCst), 0);
        clock.advance(Duration::seconds(2));
        assert_eq!(exec.0.load(Ordering::SeqCst), 0, "not started before the scheduler looks");
        assert_eq!(s.query_terminal(&id).unwrap(), JobStatus::Active);
        assert_eq!(exec.0.load(Ordering::SeqCst), 1);
        clock.advance(Duration::seconds(1));
        let JobStatus::Terminal(rec) = s.query_terminal(&id).unwrap() else { panic!() };
        assert_eq!(rec.exit_class, ExitClass::Completed);
        assert_eq!(rec.ended_at.unwrap() - rec.started_at.unwrap(), Duration::seconds(1));
        assert!(s.observe_active().is_empty());
        assert_eq!(s.query_terminal("nope"), Err(SchedulerError::UnknownJob("nope".into())));
    }

    #[test]
    fn capacity_limits_concurrency_even_across_large_jumps() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::default());
        let s = SimulatedScheduler::new(plan(2, 0.5, 1.0), clock.clone(), Arc::new(Instant::default()));
        let ids: Vec<_> = (0..3).map(|i| s.submit(job(dir.path(), &format!("j{i}"))).unwrap()).collect();
        clock.advance(Duration::seconds(10));
        let hist = s.history();
        assert_eq!(hist.len(), 3);
        assert_eq!(s.max_running(), 2);
        let start = |i: usize| hist.iter().find(|r| r.job_id == ids[i]).unwrap().started_at.unwrap();
        assert_eq!(start(2) - start(0), Duration::seconds(1), "third job waits for a slot");
    }

    #[test]
    fn injected_faults() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::default());
        let mut p = plan(4, 0.0, 2.0);
        p.injections = vec![
            Injection { ordinal: Some(0), name: None, fault: Fault::NeverStart },
            Injection { ordinal: Some(1), name: None, fault: Fault::KillAfter { seconds: 1.0 } },
            Injection { ordinal: None, name: Some("lossy".into()), fault: Fault::LoseArtifact },
        ];
        let exec = Arc::new(Instant::default());
        let s = SimulatedScheduler::new(p, clock.clone(), exec.clone());
        let never = s.submit(job(dir.path(), "n")).unwrap();
        let killed = s.submit(job(dir.path(), "k")).unwrap();
        let lossy = s.submit(job(dir.path(), "lossy")).unwrap();
        let JobStatus::Terminal(n) = s.query_terminal(&never).unwrap() else { panic!() };
        assert_eq!(n.exit_class, ExitClass::NeverStarted);
        assert_eq!(exec.0.load(Ordering::SeqCst), 2, "never-started job did not execute");
        clock.advance(Duration::milliseconds(1500));
        assert!(!s.observe_active().contains(&killed));
        let JobStatus::Terminal(k) = s.query_terminal(&killed).unwrap() else { panic!() };
        assert_eq!(k.exit_class, ExitClass::Killed);
        assert!(!dir.path().join("k").join(RESULT_FILE).exists());
        clock.advance(Duration::seconds(1));
        let JobStatus::Terminal(l) = s.query_terminal(&lossy).unwrap() else { panic!() };
        assert_eq!(l.exit_class, ExitClass::Completed);
        assert!(l.exit_detail.contains("lost"));
        assert!(!dir.path().join("lossy").join(RESULT_FILE).exists());
    }

    #[test]
    fn submit_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let s = SimulatedScheduler::new(plan(0, 0.0, 0.0), Arc::new(ManualClock::default()), Arc::new(Instant::default()));
        assert!(matches!(s.submit(job(dir.path(), "a")), Err(SchedulerError::SubmitRejected(_))));
        let s = SimulatedScheduler::new(plan(1, 0.0, 0.0), Arc::new(ManualClock::default()), Arc::new(Instant::default()));
        let missing = RenderedJob::runner("x", &dir.path().join("absent"), Path::new("r"));
        assert!(matches!(s.submit(missing), Err(SchedulerError::SubmitRejected(_))));
        assert_eq!(
            SchedulerError::SubmitRejected("x".into()).to_envelope().code,
            ErrorCode::SubmitRejected
        );
    }

    #[test]
    fn local_backend_runs_real_processes() {
        let dir = tempfile::tempdir().unwrap();
        let s = LocalScheduler::new(1);
        let mut ok = job(dir.path(), "ok");
        ok.command = vec!["sh".into(), "-c".into(), "exit 0".into()];
        let mut bad = job(dir.path(), "bad");
        bad.command = vec!["sh".into(), "-c".into(), "exit 4".into()];
        let a = s.submit(ok).unwrap();
        let b = s.submit(bad).unwrap();
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(10);
        while !s.observe_active().is_empty() {
            assert!(std::time::Instant::now() < deadline);
            std::thread::sleep(std::time::Duration::from_millis(10));
        }
        let class = |id: &str| match s.query_terminal(id).unwrap() {
            JobStatus::Terminal(r) => r.exit_class,
            JobStatus::Active => panic!("still active"),
        };
        assert_eq!(class(&a), ExitClass::Completed);
        assert_eq!(class(&b), ExitClass::Failed);
        assert_eq!(s.max_running(), 1);
    }
}
