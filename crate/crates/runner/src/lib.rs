//! The compute-side executor.
//!
//! `execute` reads `payload.json` from a run directory, rebuilds the noise
//! model from the bound snapshot, re-checks admissibility against that same
//! snapshot, simulates with the payload seed and writes `result.json` (plus
//! `timings.json`), or `error.json` on failure. It reads and writes only
//! inside the run directory and never touches the network.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use std::time::Instant;

use vqpu_core::payload::{write_atomic, ERROR_FILE, PAYLOAD_FILE, RESULT_FILE, TIMINGS_FILE};
use vqpu_core::sim::DEFAULT_MAX_QUBITS;
use vqpu_core::{
    build_noise_model, check_admissibility, parse, ErrorCode, ErrorEnvelope, ExecutionPayload, ResultArtifact,
    SimulationRequest, Simulator, Timings,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
/// The run directory could not be written at all.
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Clone, Copy)]
pub struct RunnerConfig {
    pub max_qubits: usize,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        Self { max_qubits: DEFAULT_MAX_QUBITS }
    }
}

/// Evaluates the payload in `run_dir` without touching the filesystem.
pub fn evaluate(run_dir: &Path, config: RunnerConfig) -> Result<(ResultArtifact, Timings), ErrorEnvelope> {
    let raw = fs::read(run_dir.join(PAYLOAD_FILE)).map_err(|e| {
        ErrorEnvelope::new(ErrorCode::PayloadMalformed, format!("cannot read {PAYLOAD_FILE}: {e}"))
    })?;
    let payload: ExecutionPayload = serde_json::from_slice(&raw).map_err(|e| {
        ErrorEnvelope::new(ErrorCode::PayloadMalformed, format!("malformed {PAYLOAD_FILE}: {e}"))
    })?;
    let snapshot = payload.bound_snapshot;
    snapshot.validate().map_err(|e| {
        ErrorEnvelope::new(ErrorCode::PayloadMalformed, format!("bound snapshot rejected: {e}"))
    })?;
    if payload.shots == 0 {
        return Err(ErrorEnvelope::new(ErrorCode::PayloadMalformed, "shots must be at least 1"));
    }

    let mut timings = Timings::default();

    let t = Instant::now();
    let circuit = parse(&payload.circuit_source, &payload.dialect).map_err(|e| e.to_envelope())?;
    timings.parse_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let noise = build_noise_model(&snapshot);
    timings.noise_build_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    check_admissibility(&circuit, &snapshot).map_err(|r| r.to_envelope())?;
    timings.transpile_s = t.elapsed().as_secs_f64();

    let request = SimulationRequest { circuit, noise, shots: payload.shots, seed: payload.seed };
    let result = Simulator::new(config.max_qubits)
        .run(&request)
        .map_err(|e| e.to_envelope())?;
    timings.simulate_s = result.timings.simulate_s;

    let artifact = ResultArtifact {
        task_id: payload.task_id,
        device_id: snapshot.device_id.clone(),
        snapshot_version: snapshot.snapshot_version,
        seed: result.seed,
        shots: result.shots,
        counts: result.counts,
        metadata: result.metadata,
    };
    Ok((artifact, timings))
}

/// Runs the pipeline and materializes its artifacts. Returns the process exit code.
pub fn execute(run_dir: &Path, config: RunnerConfig) -> i32 {
    match evaluate(run_dir, config) {
        Ok((artifact, timings)) => {
            let body = serde_json::to_vec_pretty(&artifact).expect("artifact serializes");
            let timing_body = serde_json::to_vec_pretty(&timings).expect("timings serialize");
            if write_atomic(&run_dir.join(TIMINGS_FILE), &timing_body).is_err()
                || write_atomic(&run_dir.join(RESULT_FILE), &body).is_err()
            {
                return EXIT_IO;
            }
            EXIT_OK
        }
        Err(envelope) => {
            let body = serde_json::to_vec_pretty(&envelope).expect("envelope serializes");
            match write_atomic(&run_dir.join(ERROR_FILE), &body) {
                Ok(()) => EXIT_FAILED,
                Err(_) => EXIT_IO,
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vqpu-runner", about = "Execute one run directory")]
struct Args {
    /// Largest register the simulator will allocate.
    #[arg(long, default_value_t = DEFAULT_MAX_QUBITS)]
    max_qubits: usize,
    run_directory: PathBuf,
}

/// Entry point for the `vqpu-runner` executable; `args` excludes the program name.
pub fn main_with_args(args: &[String]) -> i32 {
    let argv = std::iter::once("vqpu-runner".to_string()).chain(args.iter().cloned());
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    execute(&args.run_directory, RunnerConfig { max_qubits: args.max_qubits })
}
