//! Claim-time binding. Tasks are admitted against a noisy device, the device
//! is zeroed before any agent exists, and every result must come out of the
//! zeroed snapshot.

use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use vqpu_core::fixtures::{amplified_identity, AMPLIFIED_CZ_PAIRS};
use vqpu_core::TaskState;

use super::{all_zero, fixed_plan, probability, tv_from, ExpResult, Lab, Report};
use crate::harness::AgentProcess;

#[derive(Debug, Clone, Serialize)]
pub struct BindingParams {
    pub tasks: usize,
    pub shots: u64,
    pub mutate_after_s: f64,
    pub scheduler_delay_s: f64,
    pub timeout_s: f64,
}

impl Default for BindingParams {
    fn default() -> Self {
        Self { tasks: 8, shots: 1024, mutate_after_s: 1.0, scheduler_delay_s: 2.0, timeout_s: 60.0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundTask {
    pub task_id: String,
    pub state: TaskState,
    pub bound_version: Option<u64>,
    pub tv: Option<f64>,
    pub p00: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BindingReport {
    pub params: BindingParams,
    pub device_id: String,
    pub admitted_version: u64,
    pub mutated_version: u64,
    pub queued_at_mutation: usize,
    pub tasks: Vec<BoundTask>,
    pub post_mutation_ideal: usize,
    pub wall_s: f64,
    pub passed: bool,
}

impl Report for BindingReport {
    fn passed(&self) -> bool {
        self.passed
    }

    fn summary(&self) -> String {
        let zero = self.tasks.iter().filter(|t| t.tv == Some(0.0)).count();
        format!(
            "{}/{} post-mutation ideal, TV=0 for {}/{} (admitted at v{}, bound to v{}) in {:.1}s",
            self.post_mutation_ideal,
            self.tasks.len(),
            zero,
            self.tasks.len(),
            self.admitted_version,
            self.mutated_version,
            self.wall_s
        )
    }
}

pub fn run(lab: &Lab, params: &BindingParams) -> ExpResult<BindingReport> {
    let started = Instant::now();
    let device = lab.name("binding");
    let noisy = super::noisy_device();
    let admitted_version = lab.put_device(&device, &noisy)?;
    let source = amplified_identity(AMPLIFIED_CZ_PAIRS);
    let mut ids = Vec::new();
    for i in 0..params.tasks {
        ids.push(lab.submit(&device, &source, params.shots, 1000 + i as u64)?.task_id);
    }

    thread::sleep(Duration::from_secs_f64(params.mutate_after_s));
    let mutated_version = lab.put_device(&device, &noisy.zero_noise())?;
    let queued_at_mutation = ids
        .iter()
        .map(|id| lab.user.task(id))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .filter(|r| r.state == TaskState::Queued)
        .count();

    let plan = fixed_plan(7, params.tasks.min(4), params.scheduler_delay_s, 0.0, &lab.name("bind"));
    let config = lab.agent_config(&lab.name("agent-binding"), params.tasks.min(4), plan);
    let mut agent = AgentProcess::start(&lab.binaries.agent, &config)?;
    let records = lab.wait_terminal(&ids, Duration::from_secs_f64(params.timeout_s));
    agent.terminate(Duration::from_secs(5))?;
    let records = records?;

    let ideal = all_zero(2);
    let tasks: Vec<BoundTask> = records
        .iter()
        .map(|r| BoundTask {
            task_id: r.task_id.clone(),
            state: r.state,
            bound_version: r.bound_snapshot.as_ref().map(|s| s.snapshot_version),
            tv: tv_from(r, &ideal).ok(),
            p00: probability(r, "00"),
        })
        .collect();
    let post_mutation_ideal = tasks
        .iter()
        .filter(|t| t.state == TaskState::Completed && t.bound_version == Some(mutated_version))
        .count();
    let passed = queued_at_mutation == params.tasks
        && post_mutation_ideal == params.tasks
        && tasks.iter().all(|t| t.tv == Some(0.0) && t.p00 == 1.0);
    Ok(BindingReport {
        params: params.clone(),
        device_id: device,
        admitted_version,
        mutated_version,
        queued_at_mutation,
        tasks,
        post_mutation_ideal,
        wall_s: started.elapsed().as_secs_f64(),
        passed,
    })
}
