//! Virtual-device snapshots, snapshot validation and diffing, and the
//! syntactic admissibility predicate.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{symbol_profile, Circuit, InstructionKind};
use crate::error::{ErrorCode, ErrorEnvelope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QubitState {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitCalibration {
    pub index: usize,
    pub state: QubitState,
    pub t1_us: Option<f64>,
    pub t2_us: Option<f64>,
    pub eps_1q: Option<f64>,
    pub readout_error: Option<f64>,
}

impl QubitCalibration {
    /// An online qubit with null calibration.
    pub fn ideal(index: usize) -> Self {
        Self {
            index,
            state: QubitState::Online,
            t1_us: None,
            t2_us: None,
            eps_1q: None,
            readout_error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCalibration {
    pub src: usize,
    pub dst: usize,
    pub gate: String,
    pub eps: Option<f64>,
}

/// The time-indexed device contract. Field order is the canonical JSON key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSnapshot {
    pub device_id: String,
    pub captured_at: DateTime<Utc>,
    pub snapshot_version: u64,
    pub num_qubits: usize,
    pub native_gates: BTreeSet<String>,
    pub qubits: Vec<QubitCalibration>,
    pub edges: Vec<EdgeCalibration>,
}

/// Administrative input for creating or replacing a device: a snapshot minus
/// the fields the store assigns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub num_qubits: usize,
    pub native_gates: BTreeSet<String>,
    pub qubits: Vec<QubitCalibration>,
    pub edges: Vec<EdgeCalibration>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SnapshotError {
    #[error("invalid snapshot: {0}")]
    Invalid(String),
    #[error("snapshots belong to different devices ('{0}' vs '{1}')")]
    DeviceMismatch(String, String),
}

impl SnapshotError {
    pub fn code(&self) -> ErrorCode {
        match self {
            SnapshotError::Invalid(_) => ErrorCode::SnapshotInvalid,
            SnapshotError::DeviceMismatch(..) => ErrorCode::DeviceMismatch,
        }
    }

    pub fn to_envelope(&self) -> ErrorEnvelope {
        ErrorEnvelope::new(self.code(), self.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> SnapshotError {
    SnapshotError::Invalid(msg.into())
}

fn check_unit(name: &str, q: usize, v: Option<f64>) -> Result<(), SnapshotError> {
    match v {
        Some(x) if !(0.0..=1.0).contains(&x) => {
            Err(invalid(format!("qubit {q}: {name}={x} outside [0,1]")))
        }
        _ => Ok(()),
    }
}

fn check_nonneg(name: &str, q: usize, v: Option<f64>) -> Result<(), SnapshotError> {
    match v {
        Some(x) if !(x.is_finite() && x >= 0.0) => {
            Err(invalid(format!("qubit {q}: {name}={x} must be a nonnegative number")))
        }
        _ => Ok(()),
    }
}

impl DeviceDescriptor {
    /// Sorts qubits by index and edges by `(src, dst)`, then checks every
    /// structural and range invariant.
    pub fn validated(mut self) -> Result<Self, SnapshotError> {
        if self.num_qubits == 0 {
            return Err(invalid("num_qubits must be positive"));
        }
        self.qubits.sort_by_key(|q| q.index);
        self.edges.sort_by_key(|e| (e.src, e.dst));
        if self.qubits.len() != self.num_qubits
            || self.qubits.iter().enumerate().any(|(i, q)| q.index != i)
        {
            return Err(invalid(format!(
                "qubits must list indices 0..{} exactly once",
                self.num_qubits
            )));
        }
        for q in &self.qubits {
            check_nonneg("t1_us", q.index, q.t1_us)?;
            check_nonneg("t2_us", q.index, q.t2_us)?;
            check_unit("eps_1q", q.index, q.eps_1q)?;
            check_unit("readout_error", q.index, q.readout_error)?;
        }
        let mut seen = HashSet::new();
        for e in &self.edges {
            if e.src >= self.num_qubits || e.dst >= self.num_qubits {
                return Err(invalid(format!("edge ({},{}) endpoint out of range", e.src, e.dst)));
            }
            if e.src == e.dst {
                return Err(invalid(format!("self-loop on qubit {}", e.src)));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(invalid(format!("duplicate edge ({},{})", e.src, e.dst)));
            }
            if !self.native_gates.contains(&e.gate) {
                return Err(invalid(format!(
                    "edge ({},{}) gate '{}' is not native",
                    e.src, e.dst, e.gate
                )));
            }
            if let Some(eps) = e.eps {
                if !(0.0..=1.0).contains(&eps) {
                    return Err(invalid(format!("edge ({},{}) eps={eps} outside [0,1]", e.src, e.dst)));
                }
            }
        }
        Ok(self)
    }

    pub fn into_snapshot(
        self,
        device_id: &str,
        version: u64,
        captured_at: DateTime<Utc>,
    ) -> Result<DeviceSnapshot, SnapshotError> {
        let d = self.validated()?;
        Ok(DeviceSnapshot {
            device_id: device_id.to_string(),
            captured_at,
            snapshot_version: version,
            num_qubits: d.num_qubits,
            native_gates: d.native_gates,
            qubits: d.qubits,
            edges: d.edges,
        })
    }

    /// Copy with every error field nulled (topology and qubit states unchanged).
    pub fn zero_noise(&self) -> Self {
        let mut d = self.clone();
        for q in &mut d.qubits {
            q.eps_1q = None;
            q.readout_error = None;
            q.t1_us = None;
            q.t2_us = None;
        }
        for e in &mut d.edges {
            e.eps = None;
        }
        d
    }
}

impl DeviceSnapshot {
    pub fn descriptor(&self) -> DeviceDescriptor {
        DeviceDescriptor {
            num_qubits: self.num_qubits,
            native_gates: self.native_gates.clone(),
            qubits: self.qubits.clone(),
            edges: self.edges.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), SnapshotError> {
        if self.device_id.is_empty() {
            return Err(invalid("device_id must be non-empty"));
        }
        let d = self.descriptor();
        let sorted = d.clone().validated()?;
        if sorted != d {
            return Err(invalid("qubits and edges must be in canonical order"));
        }
        Ok(())
    }

    /// Parses and validates a snapshot from its JSON form.
    pub fn from_json(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let snap: DeviceSnapshot =
            serde_json::from_slice(bytes).map_err(|e| invalid(format!("malformed JSON: {e}")))?;
        snap.validate()?;
        Ok(snap)
    }

    /// Canonical JSON: fixed key order, sorted native gates, qubits by index,
    /// edges by `(src, dst)`, absent calibration as `null`.
    pub fn canonical_json(&self) -> Vec<u8> {
        let mut snap = self.clone();
        snap.qubits.sort_by_key(|q| q.index);
        snap.edges.sort_by_key(|e| (e.src, e.dst));
        serde_json::to_vec(&snap).expect("snapshot serialization is infallible")
    }

    pub fn qubit(&self, index: usize) -> Option<&QubitCalibration> {
        self.qubits.get(index).filter(|q| q.index == index)
    }
}

/// Field-level difference between two snapshots of one device.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotDelta {
    pub num_qubits_changed: bool,
    pub changed_qubits: Vec<usize>,
    /// Edges added, removed or recalibrated.
    pub changed_edges: Vec<(usize, usize)>,
    pub native_gates_added: Vec<String>,
    pub native_gates_removed: Vec<String>,
}

impl SnapshotDelta {
    pub fn is_empty(&self) -> bool {
        !self.num_qubits_changed
            && self.changed_qubits.is_empty()
            && self.changed_edges.is_empty()
            && self.native_gates_added.is_empty()
            && self.native_gates_removed.is_empty()
    }
}

/// Compares two snapshots, ignoring `snapshot_version` and `captured_at`.
pub fn snapshot_diff(a: &DeviceSnapshot, b: &DeviceSnapshot) -> Result<SnapshotDelta, SnapshotError> {
    if a.device_id != b.device_id {
        return Err(SnapshotError::DeviceMismatch(a.device_id.clone(), b.device_id.clone()));
    }
    let qa: BTreeMap<usize, &QubitCalibration> = a.qubits.iter().map(|q| (q.index, q)).collect();
    let qb: BTreeMap<usize, &QubitCalibration> = b.qubits.iter().map(|q| (q.index, q)).collect();
    let changed_qubits = qa
        .keys()
        .chain(qb.keys())
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|i| qa.get(i) != qb.get(i))
        .collect();

    let ea: BTreeMap<(usize, usize), &EdgeCalibration> =
        a.edges.iter().map(|e| ((e.src, e.dst), e)).collect();
    let eb: BTreeMap<(usize, usize), &EdgeCalibration> =
        b.edges.iter().map(|e| ((e.src, e.dst), e)).collect();
    let changed_edges = ea
        .keys()
        .chain(eb.keys())
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| ea.get(k) != eb.get(k))
        .collect();

    Ok(SnapshotDelta {
        num_qubits_changed: a.num_qubits != b.num_qubits,
        changed_qubits,
        changed_edges,
        native_gates_added: b.native_gates.difference(&a.native_gates).cloned().collect(),
        native_gates_removed: a.native_gates.difference(&b.native_gates).cloned().collect(),
    })
}

/// A typed admissibility rejection for the first offending instruction.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{code} at line {line}: {message}")]
pub struct Rejection {
    pub code: ErrorCode,
    pub line: usize,
    pub message: String,
}

impl Rejection {
    pub fn to_envelope(&self) -> ErrorEnvelope {
        ErrorEnvelope::new(self.code, self.to_string())
            .with_detail(serde_json::json!({ "line": self.line }))
    }
}

/// Directed-edge index built once per check.
struct EdgeIndex<'a> {
    pairs: HashSet<(usize, usize)>,
    snapshot: &'a DeviceSnapshot,
}

impl<'a> EdgeIndex<'a> {
    fn new(snapshot: &'a DeviceSnapshot) -> Self {
        Self {
            pairs: snapshot.edges.iter().map(|e| (e.src, e.dst)).collect(),
            snapshot,
        }
    }

    fn check_qubit(&self, q: usize, line: usize) -> Result<(), Rejection> {
        match self.snapshot.qubit(q) {
            None => Err(Rejection {
                code: ErrorCode::QubitOutOfRange,
                line,
                message: format!("qubit {q} does not exist on device '{}'", self.snapshot.device_id),
            }),
            Some(cal) if cal.state != QubitState::Online => Err(Rejection {
                code: ErrorCode::QubitOffline,
                line,
                message: format!("qubit {q} is offline"),
            }),
            Some(_) => Ok(()),
        }
    }
}

/// Syntactic, linear-time admissibility of `c` on `snapshot`.
///
/// Every gate symbol must be native, every referenced qubit online, and every
/// two-qubit operand pair `(i, j)` present as the directed edge `i -> j`.
/// Barriers, measurements and resets are not gates. Only the first violation
/// is reported.
pub fn check_admissibility(c: &Circuit, snapshot: &DeviceSnapshot) -> Result<(), Rejection> {
    let index = EdgeIndex::new(snapshot);
    for inst in &c.instructions {
        for &q in &inst.operands {
            if q >= snapshot.num_qubits {
                return index.check_qubit(q, inst.line);
            }
        }
        if inst.kind == InstructionKind::Gate {
            let sym = inst.symbol().unwrap_or_default();
            if !snapshot.native_gates.contains(sym) {
                return Err(Rejection {
                    code: ErrorCode::UnsupportedGate,
                    line: inst.line,
                    message: format!("gate '{sym}' is not native to '{}'", snapshot.device_id),
                });
            }
        }
        for &q in &inst.operands {
            index.check_qubit(q, inst.line)?;
        }
        if let (InstructionKind::Gate, [a, b]) = (inst.kind, &inst.operands[..]) {
            if !index.pairs.contains(&(*a, *b)) {
                return Err(Rejection {
                    code: ErrorCode::TopologyViolation,
                    line: inst.line,
                    message: format!("no directed coupling {a} -> {b}"),
                });
            }
        }
    }
    // Qubits read out by the implicit final measurement.
    if c.measured_qubits.is_empty() {
        for q in 0..c.num_qubits {
            index.check_qubit(q, c.header_line)?;
        }
    }
    debug_assert!(symbol_profile(c).referenced_qubits.iter().all(|&q| q < c.num_qubits));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{parse, DIALECT_NQASM1};

    pub(crate) fn line_device(n: usize) -> DeviceSnapshot {
        let edges = (0..n.saturating_sub(1))
            .flat_map(|i| {
                [
                    EdgeCalibration { src: i, dst: i + 1, gate: "cz".into(), eps: None },
                    EdgeCalibration { src: i + 1, dst: i, gate: "cz".into(), eps: None },
                ]
            })
            .collect();
        DeviceDescriptor {
            num_qubits: n,
            native_gates: ["cz", "sx", "rz", "id", "delay"].iter().map(|s| s.to_string()).collect(),
            qubits: (0..n).map(QubitCalibration::ideal).collect(),
            edges,
        }
        .into_snapshot("line", 1, DateTime::UNIX_EPOCH)
        .unwrap()
    }

    fn circ(src: &str) -> Circuit {
        parse(src, DIALECT_NQASM1).unwrap()
    }

    #[test]
    fn admits_native_circuit_on_edge() {
        assert_eq!(check_admissibility(&circ("qubits 2\ncz 0 1"), &line_device(2)), Ok(()));
    }

    #[test]
    fn offline_qubit_rejected() {
        let mut dev = line_device(4);
        dev.qubits[3].state = QubitState::Offline;
        let rej = check_admissibility(&circ("qubits 4\nmeasure 0\nsx 3"), &dev).unwrap_err();
        assert_eq!(rej.code, ErrorCode::QubitOffline);
        assert_eq!(rej.line, 3);
    }

    #[test]
    fn direction_matters() {
        let mut dev = line_device(2);
        dev.edges.retain(|e| (e.src, e.dst) == (0, 1));
        let rej = check_admissibility(&circ("qubits 2\ncz 1 0"), &dev).unwrap_err();
        assert_eq!(rej.code, ErrorCode::TopologyViolation);
        assert_eq!(rej.line, 2);
    }

    #[test]
    fn unknown_gate_and_out_of_range() {
        let rej = check_admissibility(&circ("qubits 2\ncnot 0 1"), &line_device(2)).unwrap_err();
        assert_eq!(rej.code, ErrorCode::UnsupportedGate);
        let rej = check_admissibility(&circ("qubits 5\nsx 4"), &line_device(3)).unwrap_err();
        assert_eq!(rej.code, ErrorCode::QubitOutOfRange);
    }

    #[test]
    fn syntactic_constructs_are_not_gates() {
        let mut dev = line_device(2);
        dev.native_gates.clear();
        dev.edges.clear();
        let c = circ("qubits 2\nbarrier\nreset 0\nmeasure 0\nmeasure 1");
        assert_eq!(check_admissibility(&c, &dev), Ok(()));
    }

    #[test]
    fn implicit_measurement_needs_online_qubits() {
        let mut dev = line_device(3);
        dev.qubits[2].state = QubitState::Offline;
        let rej = check_admissibility(&circ("# c\nqubits 3\nsx 0"), &dev).unwrap_err();
        assert_eq!((rej.code, rej.line), (ErrorCode::QubitOffline, 2));
        assert!(check_admissibility(&circ("qubits 3\nsx 0\nmeasure 0"), &dev).is_ok());
    }

    #[test]
    fn descriptor_validation() {
        let base = line_device(3).descriptor();
        let mut d = base.clone();
        d.qubits[1].readout_error = Some(1.2);
        assert!(matches!(d.validated(), Err(SnapshotError::Invalid(_))));
        let mut d = base.clone();
        d.qubits[0].t1_us = Some(-1.0);
        assert!(d.validated().is_err());
        let mut d = base.clone();
        d.edges.push(EdgeCalibration { src: 1, dst: 1, gate: "cz".into(), eps: None });
        assert!(d.validated().is_err());
        let mut d = base.clone();
        d.edges.push(d.edges[0].clone());
        assert!(d.validated().is_err());
        let mut d = base.clone();
        d.edges[0].gate = "ecr".into();
        assert!(d.validated().is_err());
        let mut d = base.clone();
        d.qubits.pop();
        assert!(d.validated().is_err());
        let mut d = base;
        d.qubits.reverse();
        d.edges.reverse();
        assert!(d.validated().is_ok());
    }

    #[test]
    fn canonical_json_key_order() {
        let s = line_device(2);
        let text = String::from_utf8(s.canonical_json()).unwrap();
        assert!(
            text.starts_with(concat!(
                r#"{"device_id":"line","captured_at":"1970-01-01T00:00:00Z","snapshot_version":1,"#,
                r#""num_qubits":2,"native_gates":["cz","delay","id","rz","sx"],"#,
                r#""qubits":[{"index":0,"state":"ONLINE","t1_us":null"#
            )),
            "{text}"
        );
        let back = DeviceSnapshot::from_json(text.as_bytes()).unwrap();
        assert_eq!(back.canonical_json(), s.canonical_json());
    }

    #[test]
    fn diff_cases() {
        let s = line_device(3);
        assert!(snapshot_diff(&s, &s).unwrap().is_empty());

        let mut noisy = s.clone();
        noisy.qubits[1].eps_1q = Some(0.01);
        noisy.edges[2].eps = Some(0.02);
        noisy.snapshot_version = 7;
        let zeroed = noisy.descriptor().zero_noise().into_snapshot("line", 8, Utc::now()).unwrap();
        let delta = snapshot_diff(&noisy, &zeroed).unwrap();
        assert_eq!(delta.changed_qubits, vec![1]);
        assert_eq!(delta.changed_edges, vec![(noisy.edges[2].src, noisy.edges[2].dst)]);
        assert!(delta.native_gates_added.is_empty());

        let mut other = s.clone();
        other.device_id = "other".into();
        assert_eq!(snapshot_diff(&s, &other).unwrap_err().code(), ErrorCode::DeviceMismatch);
    }
}
