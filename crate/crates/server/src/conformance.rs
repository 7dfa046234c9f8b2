//! Randomized lifecycle checking against a reference model.
//!
//! Each sequence drives a fresh in-memory store with random operations from
//! random actors, predicts every outcome with a tiny independent model, and
//! afterwards rebuilds each task's state from the event log alone.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, Duration};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqpu_core::clock::ManualClock;
use vqpu_core::device::{DeviceDescriptor, QubitCalibration};
use vqpu_core::sim::{SimMetadata, Timings};
use vqpu_core::task::LEGAL_EDGES;
use vqpu_core::{DeviceSnapshot, ErrorCode, ErrorEnvelope, SimulationResult, TaskState};

use crate::events::EventHub;
use crate::store::{LifecycleError, NewTask, Outcome, TaskStore};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConformanceReport {
    pub sequences: u64,
    pub operations: u64,
    /// Distinct `(from, to)` state changes observed.
    pub edges_seen: BTreeSet<(TaskState, TaskState)>,
    /// State changes outside the legal edge set.
    pub illegal_edges: u64,
    /// Mutations attempted on terminal tasks, and how many were accepted.
    pub post_terminal_attempts: u64,
    pub post_terminal_accepted: u64,
    /// Duplicate terminal reports, and how many changed the stored task.
    pub duplicate_terminal_reports: u64,
    pub duplicate_terminal_effects: u64,
    /// Store results that disagreed with the model.
    pub model_mismatches: u64,
    /// Tasks whose event-log reconstruction differed from the store.
    pub replay_mismatches: u64,
    pub first_failure: Option<String>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.illegal_edges == 0
            && self.post_terminal_accepted == 0
            && self.duplicate_terminal_effects == 0
            && self.model_mismatches == 0
            && self.replay_mismatches == 0
    }

    fn fail(&mut self, msg: String) {
        if self.first_failure.is_none() {
            self.first_failure = Some(msg);
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Enqueue,
    Claim(usize),
    ReportRunning(usize, usize),
    Complete(usize, usize),
    Fail(usize, usize),
    Heartbeat(usize, usize),
    Requeue(usize),
    Cancel(usize),
    ForceFail(usize),
}

fn random_op(rng: &mut ChaCha8Rng, agents: usize) -> Op {
    let t = rng.random_range(0..4);
    let a = rng.random_range(0..agents);
    match rng.random_range(0..16) {
        0..=2 => Op::Enqueue,
        3..=5 => Op::Claim(a),
        6 => Op::ReportRunning(t, a),
        7..=8 => Op::Complete(t, a),
        9 => Op::Fail(t, a),
        10 => Op::Heartbeat(t, a),
        11..=12 => Op::Requeue(t),
        13..=14 => Op::Cancel(t),
        _ => Op::ForceFail(t),
    }
}

#[derive(Debug, Clone)]
struct ModelTask {
    id: String,
    state: TaskState,
    owner: Option<usize>,
}

fn snapshot(version: u64) -> DeviceSnapshot {
    DeviceDescriptor {
        num_qubits: 1,
        native_gates: ["sx".to_string()].into_iter().collect(),
        qubits: vec![QubitCalibration::ideal(0)],
        edges: vec![],
    }
    .into_snapshot("dev", version, DateTime::UNIX_EPOCH)
    .expect("fixture snapshot is valid")
}

fn result() -> SimulationResult {
    SimulationResult {
        counts: [("0".to_string(), 1)].into(),
        shots: 1,
        timings: Timings::default(),
        seed: 0,
        metadata: SimMetadata::default(),
    }
}

fn code_of(r: &Result<impl Sized, LifecycleError>) -> Option<ErrorCode> {
    r.as_ref().err().map(|e| e.code())
}

/// Runs `sequences` random sequences of up to `max_len` operations each.
pub fn run_random_sequences(sequences: u64, max_len: usize, seed: u64) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents = ["agent-0", "agent-1"];
    for seq in 0..sequences {
        let clock = Arc::new(ManualClock::default());
        let hub = Arc::new(EventHub::in_memory(clock.clone()));
        let store = TaskStore::new(clock.clone(), hub.clone());
        let mut model: Vec<ModelTask> = Vec::new();
        let mut version = 0u64;
        let len = rng.random_range(1..=max_len);
        for _ in 0..len {
            report.operations += 1;
            clock.advance(Duration::milliseconds(1));
            let op = random_op(&mut rng, agents.len());
            let before: Vec<TaskState> = model.iter().map(|t| t.state).collect();
            let pick = |i: usize| (!model.is_empty()).then(|| i % model.len());
            let mut expected: Option<ErrorCode> = None;
            let mut touched: Option<usize> = None;
            let mut terminal_attempt = false;
            let actual: Option<ErrorCode> = match op {
                Op::Enqueue => {
                    let r = store.enqueue(NewTask {
                        circuit_source: "qubits 1\nsx 0".into(),
                        dialect: "nqasm-1".into(),
                        shots: 1,
                        device_id: "dev".into(),
                        seed: 0,
                        submitted_by: "user".into(),
                    });
                    if let Ok(rec) = &r {
                        model.push(ModelTask { id: rec.task_id.clone(), state: TaskState::Queued, owner: None });
                    }
                    code_of(&r)
                }
                Op::Claim(a) => {
                    version += 1;
                    let v = version;
                    let r = store.claim(agents[a], &move |_| Some(snapshot(v)));
                    let want = model.iter().position(|t| t.state == TaskState::Queued);
                    match (&r, want) {
                        (Ok(Some((rec, snap))), Some(i)) => {
                            if rec.task_id != model[i].id || snap.snapshot_version != v {
                                report.model_mismatches += 1;
                                report.fail(format!("seq {seq}: claim returned the wrong task or snapshot"));
                            }
                            model[i].state = TaskState::Running;
                            model[i].owner = Some(a);
                            touched = Some(i);
                        }
                        (Ok(None), None) => {}
                        _ => {
                            report.model_mismatches += 1;
                            report.fail(format!("seq {seq}: claim disagreed with model ({want:?})"));
                        }
                    }
                    code_of(&r)
                }
                Op::ReportRunning(t, a) | Op::Heartbeat(t, a) if pick(t).is_some() => {
                    let i = pick(t).unwrap();
                    let m = &model[i];
                    if let Op::ReportRunning(..) = op {
                        expected = if m.state != TaskState::Running {
                            Some(ErrorCode::IllegalTransition)
                        } else if m.owner != Some(a) {
                            Some(ErrorCode::NotOwner)
                        } else {
                            None
                        };
                        terminal_attempt = m.state.is_terminal();
                        code_of(&store.report_running(&m.id, agents[a], "job"))
                    } else {
                        code_of(&store.heartbeat(agents[a], std::slice::from_ref(&m.id)))
                    }
                }
                Op::Complete(t, a) | Op::Fail(t, a) if pick(t).is_some() => {
                    let i = pick(t).unwrap();
                    let m = model[i].clone();
                    expected = if m.state != TaskState::Running {
                        Some(ErrorCode::IllegalTransition)
                    } else if m.owner != Some(a) {
                        Some(ErrorCode::NotOwner)
                    } else {
                        None
                    };
                    terminal_attempt = m.state.is_terminal();
                    let duplicate_report = m.state.is_terminal();
                    let stored_before = store.get(&m.id).ok();
                    let outcome = match op {
                        Op::Complete(..) => Outcome::Completed(result()),
                        _ => Outcome::Failed(ErrorEnvelope::new(ErrorCode::RunnerException, "boom")),
                    };
                    let r = store.report_terminal(&m.id, agents[a], outcome, None);
                    if duplicate_report {
                        report.duplicate_terminal_reports += 1;
                        if store.get(&m.id).ok() != stored_before {
                            report.duplicate_terminal_effects += 1;
                            report.fail(format!("seq {seq}: duplicate terminal report changed {}", m.id));
                        }
                    }
                    if expected.is_none() {
                        model[i].state =
                            if matches!(op, Op::Complete(..)) { TaskState::Completed } else { TaskState::Failed };
                        touched = Some(i);
                    }
                    code_of(&r)
                }
                Op::Requeue(t) | Op::Cancel(t) | Op::ForceFail(t) if pick(t).is_some() => {
                    let i = pick(t).unwrap();
                    let m = model[i].clone();
                    terminal_attempt = m.state.is_terminal();
                    let (allowed, target, r) = match op {
                        Op::Requeue(_) => (
                            m.state == TaskState::Running,
                            TaskState::Queued,
                            code_of(&store.requeue(&m.id, "admin")),
                        ),
                        Op::Cancel(_) => (
                            !m.state.is_terminal(),
                            TaskState::Cancelled,
                            code_of(&store.cancel(&m.id, "admin", true)),
                        ),
                        _ => (
                            !m.state.is_terminal(),
                            TaskState::Failed,
                            code_of(&store.force_fail(&m.id, "admin", None)),
                        ),
                    };
                    if allowed {
                        model[i].state = target;
                        if target == TaskState::Queued {
                            model[i].owner = None;
                        }
                        touched = Some(i);
                    } else {
                        expected = Some(ErrorCode::IllegalTransition);
                    }
                    r
                }
                _ => None,
            };
            if actual != expected {
                report.model_mismatches += 1;
                report.fail(format!("seq {seq}: {op:?} returned {actual:?}, model expected {expected:?}"));
            }
            if terminal_attempt {
                report.post_terminal_attempts += 1;
                if actual.is_none() {
                    report.post_terminal_accepted += 1;
                }
            }
            for (i, m) in model.iter().enumerate() {
                let stored = store.get(&m.id).map(|r| r.state).ok();
                if stored != Some(m.state) {
                    report.model_mismatches += 1;
                    report.fail(format!("seq {seq}: task {i} stored {stored:?}, model {:?}", m.state));
                }
                let from = before.get(i).copied();
                if let Some(from) = from {
                    if from != m.state {
                        report.edges_seen.insert((from, m.state));
                        if !LEGAL_EDGES.contains(&(from, m.state)) || touched != Some(i) {
                            report.illegal_edges += 1;
                            report.fail(format!("seq {seq}: illegal edge {from} -> {}", m.state));
                        }
                    }
                }
            }
        }
        let mut rebuilt: BTreeMap<String, TaskState> = BTreeMap::new();
        let mut last_seq = 0;
        for e in hub.retained() {
            if e.sequence != last_seq + 1 {
                report.replay_mismatches += 1;
                report.fail(format!("seq {seq}: event log gap at {}", e.sequence));
            }
            last_seq = e.sequence;
            if let (Some(id), Some(state)) = (e.task_id, e.event_type.resulting_state()) {
                rebuilt.insert(id, state);
            }
        }
        for m in &model {
            if rebuilt.get(&m.id) != Some(&m.state) {
                report.replay_mismatches += 1;
                report.fail(format!("seq {seq}: replay gives {:?} for {}, store has {}", rebuilt.get(&m.id), m.id, m.state));
            }
        }
        report.sequences += 1;
    }
    report
}
