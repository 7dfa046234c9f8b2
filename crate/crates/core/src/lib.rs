//! Core domain of the virtual-QPU service: the `nqasm-1` circuit dialect,
//! device snapshots and admissibility, calibration-derived noise, the
//! trajectory statevector engine, and the task and run-directory types shared
//! by the control plane, the agent and the runner.
//!
//! Nothing in this crate performs network I/O.

pub mod circuit;
pub mod clock;
pub mod device;
pub mod error;
pub mod fixtures;
pub mod noise;
pub mod payload;
pub mod sim;
pub mod task;

pub use circuit::{parse, symbol_profile, Circuit, Instruction, InstructionKind, SymbolProfile, DIALECT_NQASM1};
pub use device::{
    check_admissibility, snapshot_diff, DeviceDescriptor, DeviceSnapshot, EdgeCalibration, QubitCalibration,
    QubitState, Rejection, SnapshotDelta,
};
pub use error::{ErrorCode, ErrorEnvelope};
pub use noise::{build_noise_model, NoiseModel};
pub use payload::{ExecutionPayload, ResultArtifact};
pub use sim::{SimulationRequest, SimulationResult, Simulator, Timings};
pub use task::{EventType, LifecycleEvent, TaskRecord, TaskState};
