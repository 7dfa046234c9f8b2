//! Exact density-matrix evolution for circuits of at most three qubits.
//!
//! Operators are assembled as full `2^n x 2^n` matrices from Kronecker
//! products, independently of the statevector kernels, so that the
//! trajectory sampler can be checked against it.

use std::collections::BTreeMap;

use num_complex::Complex64 as C;

use super::{bitstring, SimError};
use crate::circuit::{Circuit, InstructionKind};
use crate::noise::{is_physical_one_qubit_gate, NoiseModel};

pub const ORACLE_MAX_QUBITS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    dim: usize,
    data: Vec<C>,
}

impl Matrix {
    fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![C::new(0.0, 0.0); dim * dim] }
    }

    fn from_2x2(m: [[C; 2]; 2]) -> Self {
        Self { dim: 2, data: vec![m[0][0], m[0][1], m[1][0], m[1][1]] }
    }

    fn at(&self, r: usize, c: usize) -> C {
        self.data[r * self.dim + c]
    }

    fn kron(&self, other: &Matrix) -> Matrix {
        let dim = self.dim * other.dim;
        let mut out = Matrix::zeros(dim);
        for r1 in 0..self.dim {
            for c1 in 0..self.dim {
                let a = self.at(r1, c1);
                for r2 in 0..other.dim {
                    for c2 in 0..other.dim {
                        out.data[(r1 * other.dim + r2) * dim + c1 * other.dim + c2] = a * other.at(r2, c2);
                    }
                }
            }
        }
        out
    }

    fn mul(&self, other: &Matrix) -> Matrix {
        let n = self.dim;
        let mut out = Matrix::zeros(n);
        for r in 0..n {
            for k in 0..n {
                let a = self.at(r, k);
                if a == C::new(0.0, 0.0) {
                    continue;
                }
                for c in 0..n {
                    out.data[r * n + c] += a * other.at(k, c);
                }
            }
        }
        out
    }

    fn adjoint(&self) -> Matrix {
        let n = self.dim;
        let mut out = Matrix::zeros(n);
        for r in 0..n {
            for c in 0..n {
                out.data[c * n + r] = self.at(r, c).conj();
            }
        }
        out
    }

    fn add_scaled(&mut self, other: &Matrix, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    fn conjugate(&self, k: &Matrix) -> Matrix {
        k.mul(self).mul(&k.adjoint())
    }
}

fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

fn identity2() -> [[C; 2]; 2] {
    [[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(1.0, 0.0)]]
}

fn pauli2(i: usize) -> [[C; 2]; 2] {
    let (o, z) = (c(1.0, 0.0), c(0.0, 0.0));
    match i {
        0 => identity2(),
        1 => [[z, o], [o, z]],
        2 => [[z, c(0.0, -1.0)], [c(0.0, 1.0), z]],
        _ => [[o, z], [z, -o]],
    }
}

/// Embeds per-qubit 2x2 factors into the n-qubit space. The most significant
/// Kronecker factor is the highest qubit index.
fn embed(n: usize, factors: &[(usize, [[C; 2]; 2])]) -> Matrix {
    let mut out = Matrix { dim: 1, data: vec![c(1.0, 0.0)] };
    for q in (0..n).rev() {
        let m = factors
            .iter()
            .find(|(fq, _)| *fq == q)
            .map(|(_, m)| *m)
            .unwrap_or_else(identity2);
        out = out.kron(&Matrix::from_2x2(m));
    }
    out
}

fn gate_unitary(n: usize, symbol: &str, ops: &[usize], param: Option<f64>) -> Result<Option<Matrix>, SimError> {
    let (o, z) = (c(1.0, 0.0), c(0.0, 0.0));
    Ok(match (symbol, ops) {
        ("id" | "delay", [_]) => None,
        ("rz", [q]) => {
            let theta = param.ok_or_else(|| SimError::Internal("rz without angle".into()))?;
            Some(embed(n, &[(*q, [[o, z], [z, C::from_polar(1.0, theta)]])]))
        }
        ("sx", [q]) => {
            let (p, m) = (c(0.5, 0.5), c(0.5, -0.5));
            Some(embed(n, &[(*q, [[p, m], [m, p]])]))
        }
        ("x", [q]) => Some(embed(n, &[(*q, pauli2(1))])),
        ("cz", [a, b]) => {
            let p0 = [[o, z], [z, z]];
            let p1 = [[z, z], [z, o]];
            let mut u = embed(n, &[(*a, p0)]);
            u.add_scaled(&embed(n, &[(*a, p1), (*b, pauli2(3))]), 1.0);
            Some(u)
        }
        _ => {
            return Err(SimError::Internal(format!(
                "no unitary for gate '{symbol}' on {} operand(s)",
                ops.len()
            )))
        }
    })
}

/// Exact output distribution over the circuit's readout qubits, including
/// zero-probability outcomes.
pub fn density_oracle(circuit: &Circuit, noise: &NoiseModel) -> Result<BTreeMap<String, f64>, SimError> {
    let n = circuit.num_qubits;
    if n > ORACLE_MAX_QUBITS {
        return Err(SimError::QubitLimitExceeded { requested: n, max: ORACLE_MAX_QUBITS });
    }
    let dim = 1usize << n;
    let mut rho = Matrix::zeros(dim);
    rho.data[0] = c(1.0, 0.0);

    for inst in &circuit.instructions {
        match inst.kind {
            InstructionKind::Barrier | InstructionKind::Measure => {}
            InstructionKind::Reset => {
                let q = inst.operands[0];
                let (o, z) = (c(1.0, 0.0), c(0.0, 0.0));
                let k0 = embed(n, &[(q, [[o, z], [z, z]])]);
                let k1 = embed(n, &[(q, [[z, o], [z, z]])]);
                let mut next = rho.conjugate(&k0);
                next.add_scaled(&rho.conjugate(&k1), 1.0);
                rho = next;
            }
            InstructionKind::Gate => {
                let symbol = inst.symbol().unwrap_or_default();
                if let Some(u) = gate_unitary(n, symbol, &inst.operands, inst.parameter)? {
                    rho = rho.conjugate(&u);
                }
                match inst.operands[..] {
                    [q] if is_physical_one_qubit_gate(symbol) => {
                        if let Some(p) = noise.one_qubit(q) {
                            let mut next = rho.clone();
                            next.data.iter_mut().for_each(|v| *v *= 1.0 - p);
                            for k in 1..4 {
                                next.add_scaled(&rho.conjugate(&embed(n, &[(q, pauli2(k))])), p / 3.0);
                            }
                            rho = next;
                        }
                    }
                    [a, b] => {
                        if let Some(p) = noise.two_qubit(a, b, symbol) {
                            let mut next = rho.clone();
                            next.data.iter_mut().for_each(|v| *v *= 1.0 - p);
                            for k in 1..16 {
                                let op = embed(n, &[(a, pauli2(k & 3)), (b, pauli2(k >> 2))]);
                                next.add_scaled(&rho.conjugate(&op), p / 15.0);
                            }
                            rho = next;
                        }
                    }
                    _ => {}
                }
            }
        }
    }

    let readout = circuit.readout_qubits();
    let m = readout.len();
    let mut dist = vec![0.0f64; 1usize << m];
    for i in 0..dim {
        let p = rho.at(i, i).re.max(0.0);
        let mut outcome = 0usize;
        for (k, &q) in readout.iter().enumerate() {
            if i >> q & 1 == 1 {
                outcome |= 1 << k;
            }
        }
        dist[outcome] += p;
    }
    for (k, &q) in readout.iter().enumerate() {
        if let Some(r) = noise.readout(q) {
            let bit = 1usize << k;
            let prev = dist.clone();
            for (o, v) in dist.iter_mut().enumerate() {
                *v = (1.0 - r) * prev[o] + r * prev[o ^ bit];
            }
        }
    }
    Ok(dist
        .into_iter()
        .enumerate()
        .map(|(o, p)| (bitstring(o as u64, m), p))
        .collect())
}
