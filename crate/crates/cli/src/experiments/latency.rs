//! Service overhead versus circuit width.
//!
//! The end-to-end sweep submits random native circuits one at a time and
//! decomposes each task's latency into admission, queue-to-claim, execution
//! and result retrieval using event timestamps. A separate in-process sweep
//! measures how pure simulation time scales with width.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vqpu_core::fixtures::{heavy_hex_20, random_layered_circuit};
use vqpu_core::sim::DEFAULT_MAX_QUBITS;
use vqpu_core::{parse, EventType, NoiseModel, SimulationRequest, Simulator, TaskState, DIALECT_NQASM1};

use super::{fail, fixed_plan, median, seconds_between, ExpError, ExpResult, Lab, Report};
use crate::harness::AgentProcess;

#[derive(Debug, Clone, Serialize)]
pub struct LatencyParams {
    pub widths: Vec<usize>,
    pub repetitions: usize,
    pub layers: usize,
    pub shots: u64,
    pub scaling_widths: Vec<usize>,
    pub scaling_layers: usize,
    pub scaling_repetitions: usize,
    pub max_overhead_ratio: f64,
    pub growth_band: (f64, f64),
    pub seed: u64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self {
            widths: (4..=10).collect(),
            repetitions: 15,
            layers: 10,
            shots: 256,
            scaling_widths: (14..=18).collect(),
            scaling_layers: 30,
            scaling_repetitions: 5,
            max_overhead_ratio: 2.0,
            growth_band: (1.5, 3.0),
            seed: 9,
        }
    }
}

/// Latency of one task, in seconds.
#[derive(Debug, Clone, Serialize)]
pub struct Decomposition {
    pub task_id: String,
    pub qubits: usize,
    /// Submission round trip, ending when the server has recorded the task.
    pub t_admit: f64,
    /// TASK_QUEUED to TASK_RUNNING.
    pub t_queue_claim: f64,
    /// TASK_RUNNING to TASK_COMPLETED.
    pub t_exec: f64,
    /// Round trip of the request that retrieves the terminal record.
    pub t_poll: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WidthSummary {
    pub qubits: usize,
    pub t_admit: f64,
    pub t_queue_claim: f64,
    pub t_exec: f64,
    pub t_poll: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingPoint {
    pub qubits: usize,
    pub simulate_s: f64,
    /// Ratio to the previous width.
    pub growth: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub params: LatencyParams,
    pub samples: Vec<Decomposition>,
    pub medians: Vec<WidthSummary>,
    pub admit_ratio: f64,
    pub poll_ratio: f64,
    /// Whether the per-width medians rise at every step. Informational: the
    /// verdict rests on the max/min ratio.
    pub admit_monotone: bool,
    pub poll_monotone: bool,
    pub scaling: Vec<ScalingPoint>,
    pub passed: bool,
}

impl Report for LatencyReport {
    fn passed(&self) -> bool {
        self.passed
    }

    fn summary(&self) -> String {
        let growth: Vec<String> =
            self.scaling.iter().filter_map(|p| p.growth).map(|g| format!("{g:.2}")).collect();
        let ms = |f: fn(&WidthSummary) -> f64| {
            self.medians.iter().map(|m| format!("{:.2}", f(m) * 1e3)).collect::<Vec<_>>().join(" ")
        };
        format!(
            "T_admit max/min {:.2} [{} ms], T_poll max/min {:.2} [{} ms] over {}..{} qubits; \
             simulate_s growth [{}] over {}..{} qubits",
            self.admit_ratio,
            ms(|m| m.t_admit),
            self.poll_ratio,
            ms(|m| m.t_poll),
            self.params.widths.first().copied().unwrap_or(0),
            self.params.widths.last().copied().unwrap_or(0),
            growth.join(", "),
            self.params.scaling_widths.first().copied().unwrap_or(0),
            self.params.scaling_widths.last().copied().unwrap_or(0),
        )
    }
}

fn ratio(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    max / min
}

fn strictly_increasing(values: &[f64]) -> bool {
    values.len() > 1 && values.windows(2).all(|w| w[1] > w[0])
}

fn directed_couplings() -> Vec<(usize, usize)> {
    heavy_hex_20(false).edges.iter().map(|e| (e.src, e.dst)).collect()
}

/// Pure simulation time for ideal random circuits, best of the repetitions.
/// Repetitions sweep all widths in turn so a burst of host load cannot land
/// on every run of a single width.
pub fn scaling_sweep(widths: &[usize], layers: usize, repetitions: usize, seed: u64) -> ExpResult<Vec<ScalingPoint>> {
    let couplings = directed_couplings();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let simulator = Simulator::new(DEFAULT_MAX_QUBITS);
    let mut requests = Vec::new();
    for &n in widths {
        let source = random_layered_circuit(n, layers, &couplings, &mut rng);
        let circuit = parse(&source, DIALECT_NQASM1).map_err(|e| ExpError(e.to_string()))?;
        requests.push(SimulationRequest { circuit, noise: NoiseModel::default(), shots: 64, seed });
    }
    let mut best = vec![f64::MAX; widths.len()];
    for _ in 0..repetitions.max(1) {
        for (request, b) in requests.iter().zip(&mut best) {
            let r = simulator.run(request).map_err(|e| ExpError(e.to_string()))?;
            *b = b.min(r.timings.simulate_s);
        }
    }
    let mut points: Vec<ScalingPoint> = Vec::new();
    for (&qubits, &simulate_s) in widths.iter().zip(&best) {
        let growth = points.last().map(|p| simulate_s / p.simulate_s);
        points.push(ScalingPoint { qubits, simulate_s, growth });
    }
    Ok(points)
}

fn measure_one(lab: &Lab, tap: &mut super::EventTap, device: &str, source: &str, params: &LatencyParams, seed: u64) -> ExpResult<(String, f64, f64)> {
    let t = Instant::now();
    let task_id = lab.submit(device, source, params.shots, seed)?.task_id;
    let t_admit = t.elapsed().as_secs_f64();
    tap.wait_for(Duration::from_secs(60), |events| {
        events.iter().any(|e| e.task_id.as_deref() == Some(task_id.as_str()) && e.event_type.resulting_state().is_some_and(|s| s.is_terminal()))
    })?;
    let t = Instant::now();
    let record = lab.user.task(&task_id)?;
    let t_poll = t.elapsed().as_secs_f64();
    if record.state != TaskState::Completed {
        return fail(format!("{task_id} ended {} instead of COMPLETED", record.state));
    }
    Ok((task_id, t_admit, t_poll))
}

pub fn run(lab: &Lab, params: &LatencyParams) -> ExpResult<LatencyReport> {
    let device = lab.name("latency");
    lab.put_device(&device, &super::noisy_device())?;
    let couplings = directed_couplings();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut tap = lab.tap()?;
    let plan = fixed_plan(13, 1, 0.0, 0.0, &lab.name("lat"));
    let mut agent = AgentProcess::start(&lab.binaries.agent, &lab.agent_config(&lab.name("agent-latency"), 1, plan))?;

    let outcome = (|| {
        // Warm the connection pool and the agent before measuring.
        let warm = random_layered_circuit(params.widths[0], params.layers, &couplings, &mut rng);
        for i in 0..3 {
            measure_one(lab, &mut tap, &device, &warm, params, 5000 + i)?;
        }
        let mut samples = Vec::new();
        // Widths are interleaved so slow drift on the host spreads evenly.
        for rep in 0..params.repetitions {
            for &n in &params.widths {
                let source = random_layered_circuit(n, params.layers, &couplings, &mut rng);
                let (task_id, t_admit, t_poll) = measure_one(lab, &mut tap, &device, &source, params, (n * 100 + rep) as u64)?;
                let ts = |kind| tap.first(&task_id, kind).map(|e| e.timestamp);
                let (Some(q), Some(r), Some(c)) =
                    (ts(EventType::TaskQueued), ts(EventType::TaskRunning), ts(EventType::TaskCompleted))
                else {
                    return fail(format!("incomplete event trail for {task_id}"));
                };
                samples.push(Decomposition {
                    task_id,
                    qubits: n,
                    t_admit,
                    t_queue_claim: seconds_between(q, r),
                    t_exec: seconds_between(r, c),
                    t_poll,
                });
            }
        }
        Ok(samples)
    })();
    agent.terminate(Duration::from_secs(5))?;
    let samples = outcome?;

    let mut by_width: BTreeMap<usize, Vec<&Decomposition>> = BTreeMap::new();
    for s in &samples {
        by_width.entry(s.qubits).or_default().push(s);
    }
    let medians: Vec<WidthSummary> = by_width
        .iter()
        .map(|(&qubits, v)| {
            let col = |f: fn(&Decomposition) -> f64| median(&mut v.iter().map(|d| f(d)).collect::<Vec<_>>());
            WidthSummary {
                qubits,
                t_admit: col(|d| d.t_admit),
                t_queue_claim: col(|d| d.t_queue_claim),
                t_exec: col(|d| d.t_exec),
                t_poll: col(|d| d.t_poll),
            }
        })
        .collect();
    let admits: Vec<f64> = medians.iter().map(|m| m.t_admit).collect();
    let polls: Vec<f64> = medians.iter().map(|m| m.t_poll).collect();
    let admit_ratio = ratio(&admits);
    let poll_ratio = ratio(&polls);
    let admit_monotone = strictly_increasing(&admits);
    let poll_monotone = strictly_increasing(&polls);

    let scaling = scaling_sweep(&params.scaling_widths, params.scaling_layers, params.scaling_repetitions, params.seed)?;
    let (lo, hi) = params.growth_band;
    let growth_ok = scaling.iter().filter_map(|p| p.growth).all(|g| (lo..=hi).contains(&g));
    let passed = admit_ratio < params.max_overhead_ratio
        && poll_ratio < params.max_overhead_ratio
        && growth_ok
        && scaling.len() == params.scaling_widths.len();
    Ok(LatencyReport {
        params: params.clone(),
        samples,
        medians,
        admit_ratio,
        poll_ratio,
        admit_monotone,
        poll_monotone,
        scaling,
        passed,
    })
}
