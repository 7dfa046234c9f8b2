//! Cross-device identity: the same circuit interleaved across a noisy device
//! and its zero-noise twin. Ideal results must be exact; noisy results must
//! sit within three binomial standard deviations of the density-matrix value
//! for the calibration each task was bound to.

use std::time::{Duration, Instant};

use serde::Serialize;
use vqpu_core::fixtures::{amplified_identity, AMPLIFIED_CZ_PAIRS};
use vqpu_core::sim::{density_oracle, total_variation_distance};
use vqpu_core::{build_noise_model, parse, TaskRecord, TaskState, DIALECT_NQASM1};

use super::{all_zero, fixed_plan, probability, tv_from, ExpError, ExpResult, Lab, Report};
use crate::harness::AgentProcess;

#[derive(Debug, Clone, Serialize)]
pub struct FidelityParams {
    pub tasks: usize,
    pub shots: u64,
    pub sigmas: f64,
    pub timeout_s: f64,
}

impl Default for FidelityParams {
    fn default() -> Self {
        Self { tasks: 16, shots: 8192, sigmas: 3.0, timeout_s: 180.0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityTask {
    pub task_id: String,
    pub device_id: String,
    pub noisy: bool,
    pub state: TaskState,
    pub tv: Option<f64>,
    pub p00: f64,
    /// Expected distance from the ideal distribution, from the density-matrix
    /// oracle on the bound calibration.
    pub oracle_tv: f64,
    pub sigma: f64,
    pub within: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub params: FidelityParams,
    pub tasks: Vec<FidelityTask>,
    pub ideal_exact: usize,
    pub noisy_within: usize,
    pub mean_noisy_tv: f64,
    pub oracle_tv: f64,
    pub wall_s: f64,
    pub passed: bool,
}

impl Report for FidelityReport {
    fn passed(&self) -> bool {
        self.passed
    }

    fn summary(&self) -> String {
        let ideal = self.tasks.iter().filter(|t| !t.noisy).count();
        let noisy = self.tasks.len() - ideal;
        format!(
            "ideal {}/{} TV=0; noisy {}/{} within {}σ of oracle TV {:.5} (mean observed {:.5})",
            self.ideal_exact, ideal, self.noisy_within, noisy, self.params.sigmas, self.oracle_tv, self.mean_noisy_tv
        )
    }
}

/// Oracle TV from the all-zero outcome and the binomial σ of its estimate at
/// `shots`.
fn oracle_expectation(record: &TaskRecord, shots: u64) -> ExpResult<(f64, f64)> {
    let snapshot = record
        .bound_snapshot
        .as_ref()
        .ok_or_else(|| ExpError(format!("{} has no bound snapshot", record.task_id)))?;
    let circuit = parse(&record.circuit_source, DIALECT_NQASM1).map_err(|e| ExpError(e.to_string()))?;
    let exact = density_oracle(&circuit, &build_noise_model(snapshot)).map_err(|e| ExpError(e.to_string()))?;
    let tv = total_variation_distance(&exact, &all_zero(2)).map_err(|e| ExpError(e.to_string()))?;
    let p00 = exact.get("00").copied().unwrap_or(0.0);
    Ok((tv, (p00 * (1.0 - p00) / shots as f64).sqrt()))
}

pub fn run(lab: &Lab, params: &FidelityParams) -> ExpResult<FidelityReport> {
    let started = Instant::now();
    let noisy_id = lab.name("fidelity-noisy");
    let ideal_id = lab.name("fidelity-ideal");
    lab.put_device(&noisy_id, &super::noisy_device())?;
    lab.put_device(&ideal_id, &super::ideal_device())?;
    let source = amplified_identity(AMPLIFIED_CZ_PAIRS);
    let mut ids = Vec::new();
    for i in 0..params.tasks {
        let device = if i % 2 == 0 { &noisy_id } else { &ideal_id };
        ids.push(lab.submit(device, &source, params.shots, 2000 + i as u64)?.task_id);
    }

    let plan = fixed_plan(8, 4, 0.1, 0.0, &lab.name("fid"));
    let config = lab.agent_config(&lab.name("agent-fidelity"), 4, plan);
    let mut agent = AgentProcess::start(&lab.binaries.agent, &config)?;
    let records = lab.wait_terminal(&ids, Duration::from_secs_f64(params.timeout_s));
    agent.terminate(Duration::from_secs(5))?;
    let records = records?;

    let ideal = all_zero(2);
    let mut tasks = Vec::new();
    let mut oracle_tv = 0.0;
    for r in &records {
        let noisy = r.device_id == noisy_id;
        let tv = tv_from(r, &ideal).ok();
        let (expected, sigma, within) = if noisy {
            let (expected, sigma) = oracle_expectation(r, params.shots)?;
            oracle_tv = expected;
            let within = tv.is_some_and(|t| (t - expected).abs() <= params.sigmas * sigma);
            (expected, sigma, within)
        } else {
            (0.0, 0.0, tv == Some(0.0))
        };
        tasks.push(FidelityTask {
            task_id: r.task_id.clone(),
            device_id: r.device_id.clone(),
            noisy,
            state: r.state,
            tv,
            p00: probability(r, "00"),
            oracle_tv: expected,
            sigma,
            within,
        });
    }
    let ideal_exact = tasks.iter().filter(|t| !t.noisy && t.within).count();
    let noisy_within = tasks.iter().filter(|t| t.noisy && t.within).count();
    let noisy_tvs: Vec<f64> = tasks.iter().filter(|t| t.noisy).filter_map(|t| t.tv).collect();
    let mean_noisy_tv = noisy_tvs.iter().sum::<f64>() / noisy_tvs.len().max(1) as f64;
    let passed = tasks.iter().all(|t| t.state == TaskState::Completed && t.within);
    Ok(FidelityReport {
        params: params.clone(),
        tasks,
        ideal_exact,
        noisy_within,
        mean_noisy_tv,
        oracle_tv,
        wall_s: started.elapsed().as_secs_f64(),
        passed,
    })
}
