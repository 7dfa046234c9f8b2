//! Crash recovery. An agent is killed while it owns running tasks; the tasks
//! must stay RUNNING under the dead owner until an administrator requeues
//! them, after which a restarted agent completes each exactly once.

use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use vqpu_core::fixtures::{amplified_identity, AMPLIFIED_CZ_PAIRS};
use vqpu_core::{EventType, TaskState};

use super::{fail, fixed_plan, ExpResult, Lab, Report};
use crate::harness::AgentProcess;

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryParams {
    pub tasks: usize,
    /// Liveness window the server was started with.
    pub liveness_window_s: f64,
    pub timeout_s: f64,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        Self { tasks: 3, liveness_window_s: 5.0, timeout_s: 120.0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveredTask {
    pub task_id: String,
    pub owner_before_kill: Option<String>,
    pub final_state: TaskState,
    pub requeues: usize,
    pub completed_events: usize,
    pub terminal_events: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryReport {
    pub params: RecoveryParams,
    pub preserved_running: usize,
    /// Seconds after the kill during which every task was checked.
    pub observed_s: f64,
    pub observations: usize,
    pub stale_listed: usize,
    pub requeued: usize,
    pub completed: usize,
    pub duplicate_terminals: usize,
    pub tasks: Vec<RecoveredTask>,
    pub wall_s: f64,
    pub passed: bool,
}

impl Report for RecoveryReport {
    fn passed(&self) -> bool {
        self.passed
    }

    fn summary(&self) -> String {
        format!(
            "{} preserved RUNNING for {:.1}s, {} listed stale, {} requeued, {}/{} completed, {} duplicate terminals",
            self.preserved_running,
            self.observed_s,
            self.stale_listed,
            self.requeued,
            self.completed,
            self.params.tasks,
            self.duplicate_terminals
        )
    }
}

pub fn run(lab: &Lab, params: &RecoveryParams) -> ExpResult<RecoveryReport> {
    let started = Instant::now();
    let device = lab.name("recovery");
    lab.put_device(&device, &super::ideal_device())?;
    let mut tap = lab.tap()?;
    let source = amplified_identity(AMPLIFIED_CZ_PAIRS);
    let mut ids = Vec::new();
    for i in 0..params.tasks {
        ids.push(lab.submit(&device, &source, 256, 4000 + i as u64)?.task_id);
    }

    let agent_id = lab.name("agent-recovery");
    let slow = fixed_plan(11, params.tasks, 0.0, 3600.0, &lab.name("rec1"));
    let mut first = AgentProcess::start(&lab.binaries.agent, &lab.agent_config(&agent_id, params.tasks, slow))?;
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let records = ids.iter().map(|id| lab.user.task(id)).collect::<Result<Vec<_>, _>>()?;
        let submitted = records.iter().all(|r| r.state == TaskState::Running && r.scheduler_job_id.is_some());
        if submitted {
            break;
        }
        if Instant::now() >= deadline {
            return fail("the first agent never had every task running");
        }
        thread::sleep(Duration::from_millis(50));
    }
    let before: Vec<Option<String>> =
        ids.iter().map(|id| lab.user.task(id).map(|r| r.owner)).collect::<Result<_, _>>()?;
    first.kill()?;
    let killed_at = Instant::now();

    let hold = Duration::from_secs_f64(2.0 * params.liveness_window_s);
    let mut observations = 0;
    let mut preserved = true;
    while killed_at.elapsed() < hold {
        for (id, owner) in ids.iter().zip(&before) {
            let r = lab.user.task(id)?;
            preserved &= r.state == TaskState::Running && &r.owner == owner;
        }
        observations += 1;
        thread::sleep(Duration::from_millis(250));
    }
    let observed_s = killed_at.elapsed().as_secs_f64();
    let preserved_running = if preserved {
        ids.iter()
            .map(|id| lab.user.task(id))
            .collect::<Result<Vec<_>, _>>()?
            .iter()
            .filter(|r| r.state == TaskState::Running)
            .count()
    } else {
        0
    };
    let stale = lab.admin.stale(None)?;
    let stale_listed = ids.iter().filter(|id| stale.iter().any(|s| &s.task_id == *id)).count();

    let mut requeued = 0;
    for id in &ids {
        if lab.admin.requeue(id)?.state == TaskState::Queued {
            requeued += 1;
        }
    }
    let quick = fixed_plan(12, params.tasks, 0.0, 0.2, &lab.name("rec2"));
    let mut second = AgentProcess::start(&lab.binaries.agent, &lab.agent_config(&agent_id, params.tasks, quick))?;
    let remaining = Duration::from_secs_f64(params.timeout_s).saturating_sub(started.elapsed());
    let records = lab.wait_terminal(&ids, remaining);
    second.terminate(Duration::from_secs(5))?;
    let records = records?;
    tap.wait_for(Duration::from_secs(10), |events| {
        ids.iter().all(|id| events.iter().any(|e| e.task_id.as_deref() == Some(id) && e.event_type == EventType::TaskCompleted))
    })?;
    // Late duplicates would arrive after the first terminal event.
    thread::sleep(Duration::from_millis(500));
    tap.pump(Duration::ZERO);

    let tasks: Vec<RecoveredTask> = records
        .iter()
        .zip(before)
        .map(|(r, owner)| RecoveredTask {
            task_id: r.task_id.clone(),
            owner_before_kill: owner,
            final_state: r.state,
            requeues: tap.count(&r.task_id, EventType::TaskRequeued),
            completed_events: tap.count(&r.task_id, EventType::TaskCompleted),
            terminal_events: tap.terminal_count(&r.task_id),
        })
        .collect();
    let completed = tasks.iter().filter(|t| t.final_state == TaskState::Completed).count();
    let duplicate_terminals = tasks.iter().map(|t| t.terminal_events.saturating_sub(1)).sum();
    let passed = preserved_running == params.tasks
        && stale_listed == params.tasks
        && requeued == params.tasks
        && completed == params.tasks
        && duplicate_terminals == 0
        && tasks.iter().all(|t| t.requeues == 1 && t.completed_events == 1);
    Ok(RecoveryReport {
        params: params.clone(),
        preserved_running,
        observed_s,
        observations,
        stale_listed,
        requeued,
        completed,
        duplicate_terminals,
        tasks,
        wall_s: started.elapsed().as_secs_f64(),
        passed,
    })
}
