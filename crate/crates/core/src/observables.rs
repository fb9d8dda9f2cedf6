//! Two-qubit Hermitian operators and their normalized expectation values.
//!
//! The basis is the separable one, (|↑↑⟩, |↑↓⟩, |↓↑⟩, |↓↓⟩), with the first
//! tensor factor labelled qubit 1.

use nalgebra::{DVector, Matrix2, Matrix4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{phase_to_state, Chart, HomogeneousState, RealPhasePoint};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Parameters of H = ω σz⊗1 + ω 1⊗σz + μx σx⊗σx + μy σy⊗σy + μz σz⊗σz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub omega: f64,
    #[serde(default)]
    pub mu_x: f64,
    #[serde(default)]
    pub mu_y: f64,
    #[serde(default)]
    pub mu_z: f64,
}

impl HamiltonianSpec {
    /// ω(σz⊗1 + 1⊗σz) + μ σx⊗σx, no rotational symmetry about z.
    pub fn nonsymmetric(omega: f64, mu: f64) -> Self {
        HamiltonianSpec {
            omega,
            mu_x: mu,
            mu_y: 0.0,
            mu_z: 0.0,
        }
    }

    /// ω(σz⊗1 + 1⊗σz) + μ σz⊗σz, SO(2)-symmetric about z.
    pub fn symmetric(omega: f64, mu: f64) -> Self {
        HamiltonianSpec {
            omega,
            mu_x: 0.0,
            mu_y: 0.0,
            mu_z: mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.omega, self.mu_x, self.mu_y, self.mu_z];
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "Hamiltonian parameters must be finite: {self:?}"
            )))
        }
    }

    pub fn operator(&self) -> TwoQubitOperator {
        build_hamiltonian(self)
    }
}

/// A 4×4 Hermitian operator in the separable basis.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoQubitOperator {
    matrix: Matrix4<Complex64>,
}

impl TwoQubitOperator {
    /// Fails unless `matrix` equals its adjoint to 1e-12 (relative).
    pub fn new(matrix: Matrix4<Complex64>) -> Result<Self> {
        let scale = matrix.iter().map(|c| c.norm()).fold(1.0, f64::max);
        let defect = (matrix - matrix.adjoint())
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        if defect > 1e-12 * scale {
            return Err(Error::InvalidInput(format!(
                "operator is not Hermitian (defect {defect:.3e})"
            )));
        }
        Ok(TwoQubitOperator { matrix })
    }

    pub fn matrix(&self) -> &Matrix4<Complex64> {
        &self.matrix
    }

    /// H c for a homogeneous 4-vector.
    pub fn apply(&self, c: &[Complex64]) -> [Complex64; 4] {
        let mut out = [Complex64::new(0.0, 0.0); 4];
        for (i, o) in out.iter_mut().enumerate() {
            for (j, cj) in c.iter().enumerate() {
                *o += self.matrix[(i, j)] * cj;
            }
        }
        out
    }

    /// Eigenvalues sorted ascending.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let eig = self.matrix.symmetric_eigen();
        let mut ev = [0.0; 4];
        ev.copy_from_slice(eig.eigenvalues.as_slice());
        ev.sort_by(f64::total_cmp);
        ev
    }
}

pub fn pauli_x() -> Matrix2<Complex64> {
    let (o, l) = (Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0));
    Matrix2::new(o, l, l, o)
}

pub fn pauli_y() -> Matrix2<Complex64> {
    let o = Complex64::new(0.0, 0.0);
    Matrix2::new(o, -Complex64::i(), Complex64::i(), o)
}

pub fn pauli_z() -> Matrix2<Complex64> {
    let (o, l) = (Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0));
    Matrix2::new(l, o, o, -l)
}

pub fn kron(a: &Matrix2<Complex64>, b: &Matrix2<Complex64>) -> Matrix4<Complex64> {
    Matrix4::from_fn(|i, j| a[(i / 2, j / 2)] * b[(i % 2, j % 2)])
}

/// σ ⊗ 1 (acts on qubit 1).
pub fn on_first(sigma: &Matrix2<Complex64>) -> TwoQubitOperator {
    TwoQubitOperator {
        matrix: kron(sigma, &Matrix2::identity()),
    }
}

/// 1 ⊗ σ (acts on qubit 2).
pub fn on_second(sigma: &Matrix2<Complex64>) -> TwoQubitOperator {
    TwoQubitOperator {
        matrix: kron(&Matrix2::identity(), sigma),
    }
}

pub fn build_hamiltonian(spec: &HamiltonianSpec) -> TwoQubitOperator {
    let (sx, sy, sz) = (pauli_x(), pauli_y(), pauli_z());
    let id = Matrix2::identity();
    let c = |v: f64| Complex64::new(v, 0.0);
    let matrix = (kron(&sz, &id) + kron(&id, &sz)) * c(spec.omega)
        + kron(&sx, &sx) * c(spec.mu_x)
        + kron(&sy, &sy) * c(spec.mu_y)
        + kron(&sz, &sz) * c(spec.mu_z);
    TwoQubitOperator { matrix }
}

/// ⟨c|H|c⟩ / ⟨c|c⟩ for a raw amplitude vector.
pub fn expectation_amplitudes(op: &TwoQubitOperator, c: &[Complex64]) -> f64 {
    let hc = op.apply(c);
    let num: Complex64 = c.iter().zip(&hc).map(|(a, b)| a.conj() * b).sum();
    let den: f64 = c.iter().map(|a| a.norm_sqr()).sum();
    num.re / den
}

/// ⟨ψ|H|ψ⟩ / ⟨ψ|ψ⟩.
pub fn expectation(op: &TwoQubitOperator, s: &HomogeneousState) -> f64 {
    assert_eq!(s.dim(), 4, "two-qubit operators act on 4-level states");
    expectation_amplitudes(op, s.amplitudes())
}

/// The expectation as a function of the real coordinates of `chart`.
pub fn expectation_real(op: &TwoQubitOperator, x: &RealPhasePoint, chart: Chart) -> f64 {
    assert_eq!(x.dim(), 3, "two-qubit operators live on CP^3");
    expectation(op, &phase_to_state(x, chart))
}

/// Pure-state concurrence 2|c¹c⁴ − c²c³| / ‖c‖² of a raw amplitude vector.
pub fn concurrence(c: &[Complex64]) -> f64 {
    assert_eq!(c.len(), 4, "concurrence is defined for two qubits");
    let den: f64 = c.iter().map(|a| a.norm_sqr()).sum();
    2.0 * (c[0] * c[3] - c[1] * c[2]).norm() / den
}

/// Concurrence of a two-qubit state; zero exactly on product states.
pub fn entanglement_measure(s: &HomogeneousState) -> f64 {
    concurrence(s.amplitudes())
}

/// Analytic gradient of [`expectation_real`] in the ordering (q¹..q³, p¹..p³).
///
/// With c = (…, 1, …, ζ, …) and v = (H − E) c:
/// ∂E/∂q^ν = √2 Re v_k / ⟨c|c⟩, ∂E/∂p^ν = √2 Im v_k / ⟨c|c⟩,
/// where k is the homogeneous slot of ζ^ν.
pub fn gradient_expectation(
    op: &TwoQubitOperator,
    x: &RealPhasePoint,
    chart: Chart,
) -> DVector<f64> {
    assert_eq!(x.dim(), 3, "two-qubit operators live on CP^3");
    let s = phase_to_state(x, chart);
    let c = s.amplitudes();
    let norm = s.norm_sqr();
    let e = expectation_amplitudes(op, c);
    let hc = op.apply(c);
    let v: Vec<Complex64> = hc.iter().zip(c).map(|(h, a)| h - a * e).collect();
    let n = x.dim();
    let mut grad = DVector::zeros(2 * n);
    for nu in 0..n {
        let k = if nu < chart.position() { nu } else { nu + 1 };
        grad[nu] = SQRT_2 * v[k].re / norm;
        grad[n + nu] = SQRT_2 * v[k].im / norm;
    }
    grad
}
