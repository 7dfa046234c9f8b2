//! Built-in desk-scale device fixtures and workload generators.

use std::fmt::Write as _;

use rand::Rng;

use crate::device::{DeviceDescriptor, EdgeCalibration, QubitCalibration, QubitState};

pub const HEAVY_HEX_QUBITS: usize = 20;

pub const HALF_PI: f64 = std::f64::consts::FRAC_PI_2;

/// Undirected couplings of a 20-qubit heavy-hex tile: two 9-qubit rows
/// (0..=8 and 11..=19) joined by bridge qubits 9 and 10.
pub fn heavy_hex_couplings() -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..8 {
        pairs.push((i, i + 1));
    }
    for i in 11..19 {
        pairs.push((i, i + 1));
    }
    pairs.extend([(2, 9), (9, 13), (6, 10), (10, 17)]);
    pairs
}

/// The heavy-hex tile with synthetic, direction-dependent calibration, or the
/// same topology with null calibration when `noisy` is false.
pub fn heavy_hex_20(noisy: bool) -> DeviceDescriptor {
    let qubits = (0..HEAVY_HEX_QUBITS)
        .map(|q| {
            if !noisy {
                return QubitCalibration::ideal(q);
            }
            QubitCalibration {
                index: q,
                state: QubitState::Online,
                t1_us: Some(100.0 + 10.0 * (q % 7) as f64),
                t2_us: Some(80.0 + 5.0 * (q % 9) as f64),
                eps_1q: Some(2.0e-4 + 1.0e-4 * (q % 5) as f64),
                readout_error: Some(0.008 + 0.003 * ((q * 7) % 6) as f64),
            }
        })
        .collect();
    let edges = heavy_hex_couplings()
        .into_iter()
        .flat_map(|(a, b)| [(a, b), (b, a)])
        .map(|(src, dst)| EdgeCalibration {
            src,
            dst,
            gate: "cz".into(),
            eps: noisy.then(|| 0.004 + 0.001 * ((src * 3 + dst) % 5) as f64),
        })
        .collect();
    DeviceDescriptor {
        num_qubits: HEAVY_HEX_QUBITS,
        native_gates: ["cz", "delay", "id", "rz", "sx", "x"].iter().map(|s| s.to_string()).collect(),
        qubits,
        edges,
    }
    .validated()
    .expect("fixture is well-formed")
}

fn hadamard(out: &mut String, q: usize) {
    let _ = write!(out, "rz {q} {HALF_PI:?}\nsx {q}\nrz {q} {HALF_PI:?}\n");
}

/// Two-qubit workload whose ideal output is exactly `00`: both qubits go to
/// |+>, edge (0,1) is driven by an even number of CZs, then both come back.
pub fn amplified_identity(cz_pairs: usize) -> String {
    let mut src = String::from("# amplified two-qubit identity\nqubits 2\n");
    hadamard(&mut src, 0);
    hadamard(&mut src, 1);
    for _ in 0..cz_pairs {
        src.push_str("cz 0 1\ncz 0 1\n");
    }
    hadamard(&mut src, 0);
    hadamard(&mut src, 1);
    src.push_str("measure 0\nmeasure 1\n");
    src
}

/// Default amplification used by the binding and fidelity scenarios.
pub const AMPLIFIED_CZ_PAIRS: usize = 4;

/// Random layered native circuit over qubits `0..n`: each layer applies a
/// random `sx` or `rz` to every qubit, then CZs on a random maximal matching
/// of the directed `couplings` restricted to those qubits.
pub fn random_layered_circuit<R: Rng>(
    n: usize,
    layers: usize,
    couplings: &[(usize, usize)],
    rng: &mut R,
) -> String {
    let usable: Vec<(usize, usize)> = couplings.iter().copied().filter(|&(a, b)| a < n && b < n).collect();
    let mut src = format!("qubits {n}\n");
    for _ in 0..layers {
        for q in 0..n {
            if rng.random_bool(0.5) {
                let _ = writeln!(src, "sx {q}");
            } else {
                let theta: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let _ = writeln!(src, "rz {q} {theta:?}");
            }
        }
        let mut order: Vec<usize> = (0..usable.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut used = vec![false; n];
        for idx in order {
            let (a, b) = usable[idx];
            if !used[a] && !used[b] {
                used[a] = true;
                used[b] = true;
                let _ = writeln!(src, "cz {a} {b}");
            }
        }
    }
    src
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{parse, DIALECT_NQASM1};
    use crate::device::check_admissibility;
    use crate::noise::{build_noise_model, NoiseModel};
    use crate::sim::{run, SimulationRequest};
    use chrono::DateTime;
    use rand::SeedableRng;

    #[test]
    fn fixture_topology() {
        let d = heavy_hex_20(true);
        assert_eq!(d.edges.len(), 2 * heavy_hex_couplings().len());
        let ideal = heavy_hex_20(false);
        assert_eq!(ideal.zero_noise(), ideal);
        assert_eq!(d.zero_noise(), ideal);
        let m = build_noise_model(&ideal.into_snapshot("ideal", 1, DateTime::UNIX_EPOCH).unwrap());
        assert!(m.is_empty());
    }

    #[test]
    fn amplified_identity_is_ideal_00() {
        let c = parse(&amplified_identity(AMPLIFIED_CZ_PAIRS), DIALECT_NQASM1).unwrap();
        let snap = heavy_hex_20(true).into_snapshot("noisy", 1, DateTime::UNIX_EPOCH).unwrap();
        assert!(check_admissibility(&c, &snap).is_ok());
        let r = run(&SimulationRequest { circuit: c, noise: NoiseModel::default(), shots: 4096, seed: 1 })
            .unwrap();
        assert_eq!(r.counts.len(), 1);
        assert_eq!(r.counts["00"], 4096);
    }

    #[test]
    fn random_circuits_are_admissible() {
        let snap = heavy_hex_20(false).into_snapshot("d", 1, DateTime::UNIX_EPOCH).unwrap();
        let directed: Vec<_> = snap.edges.iter().map(|e| (e.src, e.dst)).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for n in [4, 5, 10] {
            let src = random_layered_circuit(n, 10, &directed, &mut rng);
            let c = parse(&src, DIALECT_NQASM1).unwrap();
            assert_eq!(check_admissibility(&c, &snap), Ok(()));
            assert!(src.contains("cz "));
        }
    }
}
