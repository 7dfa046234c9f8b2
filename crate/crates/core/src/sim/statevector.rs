use num_complex::Complex64;

pub(crate) type Amp = Complex64;

const ZERO: Amp = Complex64::new(0.0, 0.0);

/// Dense statevector; qubit `q` is bit `q` of the basis index.
#[derive(Debug, Clone)]
pub(crate) struct StateVector {
    amps: Vec<Amp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub(crate) fn from_index(i: usize) -> Self {
        match i & 3 {
            0 => Pauli::I,
            1 => Pauli::X,
            2 => Pauli::Y,
            _ => Pauli::Z,
        }
    }
}

impl StateVector {
    pub(crate) fn zero(n: usize) -> Self {
        let mut amps = vec![ZERO; 1usize << n];
        amps[0] = Amp::new(1.0, 0.0);
        Self { amps }
    }

    pub(crate) fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub(crate) fn probabilities(&self) -> impl Iterator<Item = f64> + '_ {
        self.amps.iter().map(|a| a.norm_sqr())
    }

    fn for_pairs(&mut self, q: usize, mut f: impl FnMut(&mut Amp, &mut Amp)) {
        let bit = 1usize << q;
        let len = self.amps.len();
        let mut base = 0;
        while base < len {
            for i in base..base + bit {
                let (lo, hi) = self.amps.split_at_mut(i + bit);
                f(&mut lo[i], &mut hi[0]);
            }
            base += bit << 1;
        }
    }

    pub(crate) fn apply_matrix(&mut self, q: usize, m: [[Amp; 2]; 2]) {
        self.for_pairs(q, |a0, a1| {
            let (x, y) = (*a0, *a1);
            *a0 = m[0][0] * x + m[0][1] * y;
            *a1 = m[1][0] * x + m[1][1] * y;
        });
    }

    /// diag(1, e^{i theta})
    pub(crate) fn rz(&mut self, q: usize, theta: f64) {
        let phase = Amp::from_polar(1.0, theta);
        self.for_pairs(q, |_, a1| *a1 *= phase);
    }

    pub(crate) fn sx(&mut self, q: usize) {
        let p = Amp::new(0.5, 0.5);
        let m = Amp::new(0.5, -0.5);
        self.apply_matrix(q, [[p, m], [m, p]]);
    }

    pub(crate) fn x(&mut self, q: usize) {
        self.for_pairs(q, std::mem::swap);
    }

    pub(crate) fn pauli(&mut self, q: usize, p: Pauli) {
        match p {
            Pauli::I => {}
            Pauli::X => self.x(q),
            Pauli::Y => self.for_pairs(q, |a0, a1| {
                let (x, y) = (*a0, *a1);
                *a0 = Amp::new(y.im, -y.re); // -i * y
                *a1 = Amp::new(-x.im, x.re); // i * x
            }),
            Pauli::Z => self.for_pairs(q, |_, a1| *a1 = -*a1),
        }
    }

    pub(crate) fn cz(&mut self, a: usize, b: usize) {
        let mask = (1usize << a) | (1usize << b);
        for (i, amp) in self.amps.iter_mut().enumerate() {
            if i & mask == mask {
                *amp = -*amp;
            }
        }
    }

    /// Projective reset to |0>; `u` in [0,1) selects the measured branch.
    pub(crate) fn reset(&mut self, q: usize, u: f64) {
        let bit = 1usize << q;
        let p1: f64 = self
            .amps
            .iter()
            .enumerate()
            .filter(|(i, _)| i & bit != 0)
            .map(|(_, a)| a.norm_sqr())
            .sum();
        let one = u < p1;
        let kept = if one { p1 } else { 1.0 - p1 };
        let scale = if kept > 0.0 { 1.0 / kept.sqrt() } else { 0.0 };
        self.for_pairs(q, |a0, a1| {
            *a0 = if one { *a1 * scale } else { *a0 * scale };
            *a1 = ZERO;
        });
    }
}
