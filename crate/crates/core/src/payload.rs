//! Run-directory artifacts exchanged between the agent and the runner.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::device::DeviceSnapshot;
use crate::sim::{SimMetadata, SimulationResult, Timings};

pub const PAYLOAD_FILE: &str = "payload.json";
pub const META_FILE: &str = "meta.json";
pub const RESULT_FILE: &str = "result.json";
pub const ERROR_FILE: &str = "error.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// The hermetic execution contract: the task plus the snapshot bound at claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPayload {
    pub task_id: String,
    pub circuit_source: String,
    pub dialect: String,
    pub shots: u64,
    pub seed: u64,
    pub bound_snapshot: DeviceSnapshot,
}

impl ExecutionPayload {
    /// Byte-stable JSON; the embedded snapshot is in canonical form.
    pub fn to_json(&self) -> Vec<u8> {
        let mut payload = self.clone();
        let canonical = payload.bound_snapshot.canonical_json();
        payload.bound_snapshot =
            serde_json::from_slice(&canonical).expect("canonical snapshot re-parses");
        serde_json::to_vec_pretty(&payload).expect("payload serialization is infallible")
    }
}

/// Deterministic content of `result.json`. Wall-clock timings live in
/// `timings.json` so that replays are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultArtifact {
    pub task_id: String,
    pub device_id: String,
    pub snapshot_version: u64,
    pub seed: u64,
    pub shots: u64,
    pub counts: BTreeMap<String, u64>,
    pub metadata: SimMetadata,
}

impl ResultArtifact {
    pub fn into_result(self, timings: Timings) -> SimulationResult {
        SimulationResult {
            counts: self.counts,
            shots: self.shots,
            timings,
            seed: self.seed,
            metadata: self.metadata,
        }
    }

    /// Checks the artifact against the payload it claims to answer.
    pub fn matches(&self, payload: &ExecutionPayload) -> Result<(), String> {
        if self.task_id != payload.task_id {
            return Err(format!("task_id {} != payload {}", self.task_id, payload.task_id));
        }
        if self.snapshot_version != payload.bound_snapshot.snapshot_version
            || self.device_id != payload.bound_snapshot.device_id
        {
            return Err("artifact was produced from a different snapshot".into());
        }
        if self.shots != payload.shots || self.seed != payload.seed {
            return Err("shots or seed differ from payload".into());
        }
        let total: u64 = self.counts.values().sum();
        if total != self.shots {
            return Err(format!("counts sum to {total}, expected {}", self.shots));
        }
        Ok(())
    }
}

/// Scheduler bookkeeping the agent keeps next to the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scheduler_job_id: String,
    pub submitted_at: chrono::DateTime<chrono::Utc>,
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
