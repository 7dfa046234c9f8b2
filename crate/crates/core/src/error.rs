//! Machine-readable error codes and the envelope every failure is reported in.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// The closed set of error codes used across the service, the agent and the runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    // circuit_ir
    ParseError,
    UnsupportedDialect,
    // admissibility
    UnsupportedGate,
    QubitOffline,
    QubitOutOfRange,
    TopologyViolation,
    // device model
    SnapshotInvalid,
    DeviceMismatch,
    UnknownDevice,
    DeviceUnavailable,
    // simulation
    QubitLimitExceeded,
    InternalSimError,
    NotNormalized,
    // lifecycle
    UnknownTask,
    NotOwner,
    IllegalTransition,
    StoreError,
    // control plane
    AuthFailed,
    Forbidden,
    InvalidRequest,
    ReplayWindowExceeded,
    // scheduler boundary
    SubmitRejected,
    UnknownJob,
    // runner / finalisation provenance
    PayloadMalformed,
    RunnerException,
    JobKilled,
    JobNeverStarted,
    ArtifactMissing,
    ArtifactMalformed,
    ForceFailed,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::ParseError => "PARSE_ERROR",
            ErrorCode::UnsupportedDialect => "UNSUPPORTED_DIALECT",
            ErrorCode::UnsupportedGate => "UNSUPPORTED_GATE",
            ErrorCode::QubitOffline => "QUBIT_OFFLINE",
            ErrorCode::QubitOutOfRange => "QUBIT_OUT_OF_RANGE",
            ErrorCode::TopologyViolation => "TOPOLOGY_VIOLATION",
            ErrorCode::SnapshotInvalid => "SNAPSHOT_INVALID",
            ErrorCode::DeviceMismatch => "DEVICE_MISMATCH",
            ErrorCode::UnknownDevice => "UNKNOWN_DEVICE",
            ErrorCode::DeviceUnavailable => "DEVICE_UNAVAILABLE",
            ErrorCode::QubitLimitExceeded => "QUBIT_LIMIT_EXCEEDED",
            ErrorCode::InternalSimError => "INTERNAL_SIM_ERROR",
            ErrorCode::NotNormalized => "NOT_NORMALIZED",
            ErrorCode::UnknownTask => "UNKNOWN_TASK",
            ErrorCode::NotOwner => "NOT_OWNER",
            ErrorCode::IllegalTransition => "ILLEGAL_TRANSITION",
            ErrorCode::StoreError => "STORE_ERROR",
            ErrorCode::AuthFailed => "AUTH_FAILED",
            ErrorCode::Forbidden => "FORBIDDEN",
            ErrorCode::InvalidRequest => "INVALID_REQUEST",
            ErrorCode::ReplayWindowExceeded => "REPLAY_WINDOW_EXCEEDED",
            ErrorCode::SubmitRejected => "SUBMIT_REJECTED",
            ErrorCode::UnknownJob => "UNKNOWN_JOB",
            ErrorCode::PayloadMalformed => "PAYLOAD_MALFORMED",
            ErrorCode::RunnerException => "RUNNER_EXCEPTION",
            ErrorCode::JobKilled => "JOB_KILLED",
            ErrorCode::JobNeverStarted => "JOB_NEVER_STARTED",
            ErrorCode::ArtifactMissing => "ARTIFACT_MISSING",
            ErrorCode::ArtifactMalformed => "ARTIFACT_MALFORMED",
            ErrorCode::ForceFailed => "FORCE_FAILED",
        }
    }

    /// True for the four admissibility rejections.
    pub fn is_admissibility(&self) -> bool {
        matches!(
            self,
            ErrorCode::UnsupportedGate
                | ErrorCode::QubitOffline
                | ErrorCode::QubitOutOfRange
                | ErrorCode::TopologyViolation
        )
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Structured failure record: code, message, optional detail, correlation id and timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub detail: Option<serde_json::Value>,
    pub correlation_id: String,
    pub timestamp: DateTime<Utc>,
}

impl ErrorEnvelope {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            detail: None,
            correlation_id: uuid::Uuid::new_v4().to_string(),
            timestamp: Utc::now(),
        }
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

impl fmt::Display for ErrorEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ErrorEnvelope {}
