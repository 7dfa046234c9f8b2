//! Noisy statevector simulation by Monte-Carlo Pauli trajectories.
//!
//! Each shot starts from |0...0>, applies the instruction stream, and after
//! every noisy gate inserts a uniformly random non-identity Pauli with the
//! gate's depolarizing probability. Measured bits are then flipped with the
//! per-qubit readout probability. An empty noise model is simply the case
//! where no insertion ever fires.
//!
//! Shot `k` draws from its own ChaCha stream (`seed`, stream `k`), so results
//! depend only on the request, not on how shots are split across threads.

mod metrics;
mod oracle;
pub(crate) mod statevector;

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, InstructionKind};
use crate::error::{ErrorCode, ErrorEnvelope};
use crate::noise::{is_physical_one_qubit_gate, NoiseModel};
use statevector::{Pauli, StateVector};

pub use metrics::{normalize_counts, total_variation_distance, Distribution};
pub use oracle::{density_oracle, ORACLE_MAX_QUBITS};

pub const DEFAULT_MAX_QUBITS: usize = 22;

const SHOTS_PER_CHUNK: u64 = 2048;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("circuit needs {requested} qubits, limit is {max}")]
    QubitLimitExceeded { requested: usize, max: usize },
    #[error("simulation fault: {0}")]
    Internal(String),
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
}

impl SimError {
    pub fn code(&self) -> ErrorCode {
        match self {
            SimError::QubitLimitExceeded { .. } => ErrorCode::QubitLimitExceeded,
            SimError::Internal(_) => ErrorCode::InternalSimError,
            SimError::NotNormalized(_) => ErrorCode::NotNormalized,
        }
    }

    pub fn to_envelope(&self) -> ErrorEnvelope {
        ErrorEnvelope::new(self.code(), self.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct SimulationRequest {
    pub circuit: Circuit,
    pub noise: NoiseModel,
    pub shots: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub parse_s: f64,
    pub noise_build_s: f64,
    pub transpile_s: f64,
    pub simulate_s: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.parse_s + self.noise_build_s + self.transpile_s + self.simulate_s
    }
}

/// Deterministic facts about a run beyond the counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimMetadata {
    /// Pauli insertions applied across all shots.
    pub depolarizing_events: u64,
    /// Directed pairs `(src, dst, gate)` whose edge declares a different noisy
    /// gate than the one applied; no two-qubit noise was attached to them.
    pub edge_gate_mismatches: Vec<(usize, usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub counts: BTreeMap<String, u64>,
    pub shots: u64,
    pub timings: Timings,
    pub seed: u64,
    #[serde(default)]
    pub metadata: SimMetadata,
}

#[derive(Debug, Clone, Copy)]
pub struct Simulator {
    pub max_qubits: usize,
}

impl Default for Simulator {
    fn default() -> Self {
        Self { max_qubits: DEFAULT_MAX_QUBITS }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Rz(usize, f64),
    Sx(usize),
    X(usize),
    Cz(usize, usize),
    Reset(usize),
}

#[derive(Debug, Clone, Copy)]
enum Site {
    One { q: usize, p: f64 },
    Two { a: usize, b: usize, p: f64 },
}

/// Circuit lowered to kernel ops with the noise sites that follow them.
struct Program {
    n: usize,
    ops: Vec<Op>,
    /// `(op index, site)`; the Pauli is applied right after that op.
    sites: Vec<(usize, Site)>,
    has_reset: bool,
    readout: Vec<usize>,
    readout_flip: Vec<f64>,
    mismatches: Vec<(usize, usize, String)>,
}

impl Program {
    fn lower(c: &Circuit, noise: &NoiseModel) -> Result<Self, SimError> {
        let mut ops = Vec::with_capacity(c.instructions.len());
        let mut sites = Vec::new();
        let mut mismatches = Vec::new();
        let mut has_reset = false;
        for inst in &c.instructions {
            let op = match inst.kind {
                InstructionKind::Barrier | InstructionKind::Measure => continue,
                InstructionKind::Reset => {
                    has_reset = true;
                    Op::Reset(inst.operands[0])
                }
                InstructionKind::Gate => {
                    let sym = inst.symbol().unwrap_or_default();
                    match (sym, &inst.operands[..]) {
                        ("id" | "delay", [_]) => continue,
                        ("rz", [q]) => Op::Rz(
                            *q,
                            inst.parameter
                                .ok_or_else(|| SimError::Internal(format!("line {}: rz without angle", inst.line)))?,
                        ),
                        ("sx", [q]) => Op::Sx(*q),
                        ("x", [q]) => Op::X(*q),
                        ("cz", [a, b]) => Op::Cz(*a, *b),
                        _ => {
                            return Err(SimError::Internal(format!(
                                "line {}: no unitary for gate '{sym}' on {} operand(s)",
                                inst.line,
                                inst.operands.len()
                            )))
                        }
                    }
                }
            };
            let sym = inst.symbol().unwrap_or_default();
            let site = match op {
                Op::Sx(q) | Op::X(q) if is_physical_one_qubit_gate(sym) => {
                    noise.one_qubit(q).map(|p| Site::One { q, p })
                }
                Op::Cz(a, b) => {
                    let p = noise.two_qubit(a, b, sym);
                    if p.is_none() && noise.edge_declares_other_gate(a, b, sym) {
                        let key = (a, b, sym.to_string());
                        if !mismatches.contains(&key) {
                            mismatches.push(key);
                        }
                    }
                    p.map(|p| Site::Two { a, b, p })
                }
                _ => None,
            };
            ops.push(op);
            if let Some(site) = site {
                sites.push((ops.len() - 1, site));
            }
        }
        let readout = c.readout_qubits();
        let readout_flip = readout.iter().map(|&q| noise.readout(q).unwrap_or(0.0)).collect();
        Ok(Self { n: c.num_qubits, ops, sites, has_reset, readout, readout_flip, mismatches })
    }

    /// Runs the ops, applying `events` (`(site index, pauli index)`) after
    /// their ops. Reset branches draw from `rng`.
    fn evolve(&self, events: &[(usize, usize)], rng: &mut ChaCha8Rng) -> StateVector {
        let mut state = StateVector::zero(self.n);
        let mut next_event = events.iter().peekable();
        for (i, op) in self.ops.iter().enumerate() {
            match *op {
                Op::Rz(q, theta) => state.rz(q, theta),
                Op::Sx(q) => state.sx(q),
                Op::X(q) => state.x(q),
                Op::Cz(a, b) => state.cz(a, b),
                Op::Reset(q) => state.reset(q, rng.random()),
            }
            while let Some(&&(site_idx, pauli)) = next_event.peek() {
                if self.sites[site_idx].0 != i {
                    break;
                }
                match self.sites[site_idx].1 {
                    Site::One { q, .. } => state.pauli(q, Pauli::from_index(pauli)),
                    Site::Two { a, b, .. } => {
                        state.pauli(a, Pauli::from_index(pauli & 3));
                        state.pauli(b, Pauli::from_index(pauli >> 2));
                    }
                }
                next_event.next();
            }
            debug_assert!(
                (state.norm_sqr() - 1.0).abs() < 1e-9,
                "statevector norm drifted after op {i}"
            );
        }
        state
    }

    /// Cumulative distribution over readout outcomes (bit k = readout[k]).
    fn readout_cdf(&self, state: &StateVector) -> Result<Vec<f64>, SimError> {
        let m = self.readout.len();
        let mut dist = vec![0.0f64; 1usize << m];
        let identity = self.readout.iter().enumerate().all(|(k, &q)| k == q) && m == self.n;
        for (i, p) in state.probabilities().enumerate() {
            let outcome = if identity {
                i
            } else {
                self.readout
                    .iter()
                    .enumerate()
                    .fold(0usize, |acc, (k, &q)| acc | ((i >> q & 1) << k))
            };
            dist[outcome] += p;
        }
        let mut acc = 0.0;
        for v in dist.iter_mut() {
            acc += *v;
            *v = acc;
        }
        if !acc.is_finite() || (acc - 1.0).abs() > 1e-6 {
            return Err(SimError::Internal(format!("outcome probabilities sum to {acc}")));
        }
        Ok(dist)
    }

    fn sample(cdf: &[f64], u: f64) -> u64 {
        let total = cdf[cdf.len() - 1];
        let target = u * total;
        cdf.partition_point(|&c| c <= target).min(cdf.len() - 1) as u64
    }
}

/// Renders an outcome whose bit `k` is the k-th lowest readout qubit, with the
/// highest readout qubit first.
pub(crate) fn bitstring(outcome: u64, width: usize) -> String {
    (0..width)
        .rev()
        .map(|k| if outcome >> k & 1 == 1 { '1' } else { '0' })
        .collect()
}

struct ChunkTally {
    counts: HashMap<u64, u64>,
    events: u64,
}

impl Simulator {
    pub fn new(max_qubits: usize) -> Self {
        Self { max_qubits }
    }

    pub fn run(&self, req: &SimulationRequest) -> Result<SimulationResult, SimError> {
        let started = Instant::now();
        if req.circuit.num_qubits > self.max_qubits {
            return Err(SimError::QubitLimitExceeded {
                requested: req.circuit.num_qubits,
                max: self.max_qubits,
            });
        }
        if req.shots == 0 {
            return Err(SimError::Internal("shots must be at least 1".into()));
        }
        let program = Program::lower(&req.circuit, &req.noise)?;
        let base = ChaCha8Rng::seed_from_u64(req.seed);

        // Shots without any Pauli insertion (and without resets) share one state.
        let ideal_cdf = if program.has_reset {
            None
        } else {
            let mut unused = base.clone();
            Some(program.readout_cdf(&program.evolve(&[], &mut unused))?)
        };

        let chunks: Vec<u64> = (0..req.shots.div_ceil(SHOTS_PER_CHUNK)).collect();
        let tallies = chunks
            .into_par_iter()
            .map(|chunk| {
                let lo = chunk * SHOTS_PER_CHUNK;
                let hi = (lo + SHOTS_PER_CHUNK).min(req.shots);
                let mut tally = ChunkTally { counts: HashMap::new(), events: 0 };
                let mut events = Vec::new();
                for shot in lo..hi {
                    let mut rng = base.clone();
                    rng.set_stream(shot);
                    events.clear();
                    for (idx, (_, site)) in program.sites.iter().enumerate() {
                        let (p, paulis) = match *site {
                            Site::One { p, .. } => (p, 4),
                            Site::Two { p, .. } => (p, 16),
                        };
                        if rng.random::<f64>() < p {
                            events.push((idx, rng.random_range(1..paulis)));
                        }
                    }
                    tally.events += events.len() as u64;
                    let mut outcome = match (&ideal_cdf, events.is_empty()) {
                        (Some(cdf), true) => Program::sample(cdf, rng.random()),
                        _ => {
                            let state = program.evolve(&events, &mut rng);
                            Program::sample(&program.readout_cdf(&state)?, rng.random())
                        }
                    };
                    for (k, &r) in program.readout_flip.iter().enumerate() {
                        if r > 0.0 && rng.random::<f64>() < r {
                            outcome ^= 1 << k;
                        }
                    }
                    *tally.counts.entry(outcome).or_insert(0) += 1;
                }
                Ok(tally)
            })
            .collect::<Result<Vec<ChunkTally>, SimError>>()?;

        let width = program.readout.len();
        let mut counts = BTreeMap::new();
        let mut depolarizing_events = 0;
        for tally in tallies {
            depolarizing_events += tally.events;
            for (outcome, n) in tally.counts {
                *counts.entry(bitstring(outcome, width)).or_insert(0) += n;
            }
        }
        debug_assert_eq!(counts.values().sum::<u64>(), req.shots);

        Ok(SimulationResult {
            counts,
            shots: req.shots,
            timings: Timings { simulate_s: started.elapsed().as_secs_f64(), ..Timings::default() },
            seed: req.seed,
            metadata: SimMetadata { depolarizing_events, edge_gate_mismatches: program.mismatches },
        })
    }
}

/// Runs `req` with the default qubit limit.
pub fn run(req: &SimulationRequest) -> Result<SimulationResult, SimError> {
    Simulator::default().run(req)
}
