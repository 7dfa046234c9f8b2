//! Exactly-once execution under competing agents: two agent processes with
//! two slots each drain a batch of random circuits through the simulated
//! scheduler while their sockets are audited.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vqpu_agent::{DelaySpec, FaultPlan};
use vqpu_core::fixtures::random_layered_circuit;
use vqpu_core::{EventType, TaskState};

use super::{fail, owner_of_claim, seconds_between, ExpResult, Lab, Report};
use crate::audit::ConnectionAudit;
use crate::harness::{AgentProcess, AuditSampler};

#[derive(Debug, Clone, Serialize)]
pub struct ConcurrencyParams {
    pub tasks: usize,
    pub qubits: usize,
    pub layers: usize,
    pub shots: u64,
    pub agents: usize,
    pub slots_per_agent: usize,
    pub queue_delay_s: (f64, f64),
    pub run_duration_s: (f64, f64),
    pub floor_tolerance: f64,
    pub seed: u64,
    pub timeout_s: f64,
}

impl Default for ConcurrencyParams {
    fn default() -> Self {
        Self {
            tasks: 50,
            qubits: 5,
            layers: 8,
            shots: 1024,
            agents: 2,
            slots_per_agent: 2,
            queue_delay_s: (0.1, 0.3),
            run_duration_s: (1.5, 2.5),
            floor_tolerance: 1.15,
            seed: 5,
            timeout_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub state: TaskState,
    pub owner: Option<String>,
    pub claims: usize,
    pub terminal_events: usize,
    pub claimed_by: Vec<String>,
    pub run_dirs: Vec<PathBuf>,
    /// Time the task held a scheduler slot, from submission to job end.
    pub slot_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcurrencyReport {
    pub params: ConcurrencyParams,
    pub completed: usize,
    pub duplicate_claims: usize,
    pub duplicate_terminals: usize,
    pub ambiguous_owners: usize,
    pub split: BTreeMap<String, usize>,
    pub wall_s: f64,
    pub floor_s: f64,
    pub wall_over_floor: f64,
    pub agent_work_dirs: BTreeMap<String, PathBuf>,
    pub agent_audits: BTreeMap<String, ConnectionAudit>,
    pub server_audit: Option<ConnectionAudit>,
    pub tasks: Vec<TaskOutcome>,
    pub passed: bool,
}

impl Report for ConcurrencyReport {
    fn passed(&self) -> bool {
        self.passed
    }

    fn summary(&self) -> String {
        let split: Vec<String> = self.split.values().map(|n| n.to_string()).collect();
        format!(
            "{}/{} completed exactly once; split {} with sum {}; {} duplicate claims, {} duplicate terminals; \
             wall {:.1}s = {:.3} x floor {:.1}s",
            self.completed,
            self.params.tasks,
            split.join(":"),
            self.split.values().sum::<usize>(),
            self.duplicate_claims,
            self.duplicate_terminals,
            self.wall_s,
            self.wall_over_floor,
            self.floor_s
        )
    }
}

/// Lower bound on the makespan of `durations` over `slots` identical slots.
pub fn ideal_floor(durations: &[f64], slots: usize) -> f64 {
    let total: f64 = durations.iter().sum();
    let longest = durations.iter().copied().fold(0.0, f64::max);
    (total / slots.max(1) as f64).max(longest)
}

pub fn run(lab: &Lab, params: &ConcurrencyParams) -> ExpResult<ConcurrencyReport> {
    let device = lab.name("concurrency");
    let descriptor = super::noisy_device();
    lab.put_device(&device, &descriptor)?;
    let directed: Vec<(usize, usize)> = descriptor.edges.iter().map(|e| (e.src, e.dst)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut tap = lab.tap()?;
    let mut ids = Vec::new();
    for i in 0..params.tasks {
        let source = random_layered_circuit(params.qubits, params.layers, &directed, &mut rng);
        ids.push(lab.submit(&device, &source, params.shots, 3000 + i as u64)?.task_id);
    }

    let server_addr = lab.server_addr()?;
    let server_sampler = lab.server_pid.map(|pid| AuditSampler::inbound(pid, server_addr, Duration::from_millis(50)));
    let mut agents = Vec::new();
    let mut samplers = Vec::new();
    let mut work_dirs = BTreeMap::new();
    for a in 0..params.agents {
        let id = lab.name(&format!("agent-conc{a}"));
        let plan = FaultPlan {
            seed: params.seed * 100 + a as u64,
            capacity: params.slots_per_agent,
            queue_delay: DelaySpec::Uniform { lo: params.queue_delay_s.0, hi: params.queue_delay_s.1 },
            run_duration: DelaySpec::Uniform { lo: params.run_duration_s.0, hi: params.run_duration_s.1 },
            injections: Vec::new(),
            instance: Some(format!("{id}")),
        };
        let config = lab.agent_config(&id, params.slots_per_agent, plan);
        work_dirs.insert(id.clone(), config.work_dir.clone());
        let process = AgentProcess::start(&lab.binaries.agent, &config)?;
        if let Some(pid) = process.pid() {
            samplers.push((id.clone(), AuditSampler::outbound(pid, server_addr, Duration::from_millis(50))));
        }
        agents.push(process);
    }

    let waited = lab.wait_terminal(&ids, Duration::from_secs_f64(params.timeout_s));
    let agent_audits: BTreeMap<String, ConnectionAudit> =
        samplers.into_iter().map(|(id, s)| (id, s.finish())).collect();
    let server_audit = server_sampler.map(AuditSampler::finish);
    for a in &mut agents {
        a.terminate(Duration::from_secs(5))?;
    }
    let records = waited?;
    tap.wait_for(Duration::from_secs(10), |events| {
        let terminal = events.iter().filter(|e| e.event_type.resulting_state().is_some_and(|s| s.is_terminal()));
        terminal.count() >= ids.len()
    })?;

    let mut tasks = Vec::new();
    let mut split: BTreeMap<String, usize> = work_dirs.keys().map(|k| (k.clone(), 0)).collect();
    let mut first_claim = None;
    let mut last_terminal = None;
    let mut durations = Vec::new();
    for r in &records {
        let claims: Vec<_> = tap.for_task(&r.task_id).filter(|e| e.event_type == EventType::TaskRunning).collect();
        for c in &claims {
            first_claim = Some(first_claim.map_or(c.timestamp, |t: chrono::DateTime<chrono::Utc>| t.min(c.timestamp)));
        }
        if let Some(t) = r.terminal_at {
            last_terminal = Some(last_terminal.map_or(t, |l: chrono::DateTime<chrono::Utc>| l.max(t)));
        }
        let claimed_by: Vec<String> = claims.iter().filter_map(|e| owner_of_claim(e)).collect();
        let run_dirs: Vec<PathBuf> =
            work_dirs.values().map(|w| w.join(&r.task_id)).filter(|d| d.is_dir()).collect();
        if let Some(owner) = &r.owner {
            *split.entry(owner.clone()).or_default() += 1;
        }
        let slot_s = r.accounting.as_ref().and_then(|a| Some(seconds_between(a.submitted_at?, a.ended_at?)));
        if let Some(d) = slot_s {
            durations.push(d);
        }
        tasks.push(TaskOutcome {
            task_id: r.task_id.clone(),
            state: r.state,
            owner: r.owner.clone(),
            claims: claims.len(),
            terminal_events: tap.terminal_count(&r.task_id),
            claimed_by,
            run_dirs,
            slot_s,
        });
    }
    let (Some(first), Some(last)) = (first_claim, last_terminal) else {
        return fail("no claim or terminal timestamps were observed");
    };

    let completed = tasks.iter().filter(|t| t.state == TaskState::Completed).count();
    let duplicate_claims = tasks.iter().map(|t| t.claims.saturating_sub(1)).sum();
    let duplicate_terminals = tasks.iter().map(|t| t.terminal_events.saturating_sub(1)).sum();
    let ambiguous_owners = tasks
        .iter()
        .filter(|t| {
            t.claimed_by.len() != 1
                || t.owner.as_ref() != t.claimed_by.first()
                || t.run_dirs.len() != 1
                || t.owner.as_ref().map(|o| work_dirs[o].join(&t.task_id)) != t.run_dirs.first().cloned()
        })
        .count();
    let wall_s = seconds_between(first, last);
    let floor_s = ideal_floor(&durations, params.agents * params.slots_per_agent);
    let wall_over_floor = wall_s / floor_s;
    let audits_clean = agent_audits.values().all(ConnectionAudit::passed)
        && server_audit.as_ref().is_none_or(ConnectionAudit::passed);
    let passed = completed == params.tasks
        && durations.len() == params.tasks
        && duplicate_claims == 0
        && duplicate_terminals == 0
        && ambiguous_owners == 0
        && split.values().all(|n| *n >= 1)
        && split.values().sum::<usize>() == params.tasks
        && wall_over_floor <= params.floor_tolerance
        && audits_clean;
    Ok(ConcurrencyReport {
        params: params.clone(),
        completed,
        duplicate_claims,
        duplicate_terminals,
        ambiguous_owners,
        split,
        wall_s,
        floor_s,
        wall_over_floor,
        agent_work_dirs: work_dirs,
        agent_audits,
        server_audit,
        tasks,
        passed,
    })
}
