//! Calibration-derived noise model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::device::DeviceSnapshot;

/// Gates that drive a physical pulse and therefore carry one-qubit gate error.
/// `rz` is a frame update and `id`/`delay` are timing directives.
pub const PHYSICAL_ONE_QUBIT_GATES: [&str; 2] = ["sx", "x"];

pub fn is_physical_one_qubit_gate(symbol: &str) -> bool {
    PHYSICAL_ONE_QUBIT_GATES.contains(&symbol)
}

/// Upper bound on the symmetric readout flip probability.
pub const READOUT_CLAMP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeKey {
    pub src: usize,
    pub dst: usize,
    pub gate: String,
}

impl EdgeKey {
    pub fn new(src: usize, dst: usize, gate: &str) -> Self {
        Self { src, dst, gate: gate.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EdgeNoise {
    src: usize,
    dst: usize,
    gate: String,
    p: f64,
}

/// Depolarizing and readout channels keyed by qubit or directed edge.
/// Zero-probability entries are never stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub one_qubit_depol: BTreeMap<usize, f64>,
    pub readout_flip: BTreeMap<usize, f64>,
    #[serde(with = "edge_map")]
    pub two_qubit_depol: BTreeMap<EdgeKey, f64>,
}

impl NoiseModel {
    pub fn is_empty(&self) -> bool {
        self.one_qubit_depol.is_empty() && self.readout_flip.is_empty() && self.two_qubit_depol.is_empty()
    }

    pub fn one_qubit(&self, q: usize) -> Option<f64> {
        self.one_qubit_depol.get(&q).copied()
    }

    pub fn readout(&self, q: usize) -> Option<f64> {
        self.readout_flip.get(&q).copied()
    }

    pub fn two_qubit(&self, src: usize, dst: usize, gate: &str) -> Option<f64> {
        self.two_qubit_depol.get(&EdgeKey::new(src, dst, gate)).copied()
    }

    /// True when the directed pair carries noise under a gate other than `gate`.
    pub fn edge_declares_other_gate(&self, src: usize, dst: usize, gate: &str) -> bool {
        self.two_qubit_depol
            .keys()
            .any(|k| k.src == src && k.dst == dst && k.gate != gate)
    }

    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("noise model serialization is infallible")
    }
}

mod edge_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<EdgeKey, f64>, s: S) -> Result<S::Ok, S::Error> {
        let list: Vec<EdgeNoise> = map
            .iter()
            .map(|(k, &p)| EdgeNoise { src: k.src, dst: k.dst, gate: k.gate.clone(), p })
            .collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<EdgeKey, f64>, D::Error> {
        let list = Vec::<EdgeNoise>::deserialize(d)?;
        Ok(list.into_iter().map(|e| (EdgeKey::new(e.src, e.dst, &e.gate), e.p)).collect())
    }
}

/// Derives the noise model from snapshot calibration.
///
/// One-qubit depolarizing strength is `eps_1q`, readout flip is
/// `min(readout_error, 0.5)`, and each directed edge with `eps > 0` gets a
/// two-qubit depolarizing entry under its declared gate. T1/T2 are not used.
pub fn build_noise_model(snapshot: &DeviceSnapshot) -> NoiseModel {
    let mut model = NoiseModel::default();
    for q in &snapshot.qubits {
        if let Some(eps) = q.eps_1q.filter(|&e| e > 0.0) {
            model.one_qubit_depol.insert(q.index, eps.min(1.0));
        }
        if let Some(r) = q.readout_error.filter(|&r| r > 0.0) {
            model.readout_flip.insert(q.index, r.min(READOUT_CLAMP));
        }
    }
    for e in &snapshot.edges {
        if let Some(eps) = e.eps.filter(|&p| p > 0.0) {
            model.two_qubit_depol.insert(EdgeKey::new(e.src, e.dst, &e.gate), eps.min(1.0));
        }
    }
    model
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceDescriptor, EdgeCalibration, QubitCalibration};
    use chrono::DateTime;

    fn snapshot(qubits: Vec<QubitCalibration>, edges: Vec<EdgeCalibration>) -> DeviceSnapshot {
        DeviceDescriptor {
            num_qubits: qubits.len(),
            native_gates: ["cz", "sx", "rz"].iter().map(|s| s.to_string()).collect(),
            qubits,
            edges,
        }
        .into_snapshot("dev", 1, DateTime::UNIX_EPOCH)
        .unwrap()
    }

    #[test]
    fn null_calibration_gives_empty_model() {
        let s = snapshot(
            (0..3).map(QubitCalibration::ideal).collect(),
            vec![EdgeCalibration { src: 0, dst: 1, gate: "cz".into(), eps: None }],
        );
        let m = build_noise_model(&s);
        assert!(m.is_empty());
    }

    #[test]
    fn readout_clamps_to_half() {
        let mut q = QubitCalibration::ideal(0);
        q.readout_error = Some(0.6);
        let m = build_noise_model(&snapshot(vec![q], vec![]));
        assert_eq!(m.readout(0), Some(0.5));
    }

    #[test]
    fn zero_entries_are_dropped_and_direction_kept() {
        let mut q0 = QubitCalibration::ideal(0);
        q0.eps_1q = Some(0.0);
        q0.readout_error = Some(0.02);
        let mut q1 = QubitCalibration::ideal(1);
        q1.eps_1q = Some(0.01);
        let edges = vec![
            EdgeCalibration { src: 0, dst: 1, gate: "cz".into(), eps: Some(0.03) },
            EdgeCalibration { src: 1, dst: 0, gate: "cz".into(), eps: Some(0.0) },
        ];
        let m = build_noise_model(&snapshot(vec![q0, q1], edges));
        assert_eq!(m.one_qubit(0), None);
        assert_eq!(m.one_qubit(1), Some(0.01));
        assert_eq!(m.readout(0), Some(0.02));
        assert_eq!(m.two_qubit(0, 1, "cz"), Some(0.03));
        assert_eq!(m.two_qubit(1, 0, "cz"), None);
        assert!(m.edge_declares_other_gate(0, 1, "ecr"));
        assert!(!m.edge_declares_other_gate(0, 1, "cz"));
    }

    #[test]
    fn serialization_is_deterministic() {
        let mut q = QubitCalibration::ideal(0);
        q.eps_1q = Some(0.002);
        let s = snapshot(
            vec![q, QubitCalibration::ideal(1)],
            vec![EdgeCalibration { src: 1, dst: 0, gate: "cz".into(), eps: Some(0.01) }],
        );
        let a = build_noise_model(&s);
        let b = build_noise_model(&s.clone());
        assert_eq!(a.canonical_json(), b.canonical_json());
        let back: NoiseModel = serde_json::from_slice(&a.canonical_json()).unwrap();
        assert_eq!(back, a);
    }
}
