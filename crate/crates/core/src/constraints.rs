//! Dynamics constrained to the separable states CP¹×CP¹ ⊂ CP³.
//!
//! In chart 1 the separable states are the graph ζ³ = ζ¹ζ², i.e. the zero
//! set of
//!
//! ```text
//! f1 = p1 p2 − q1 q2 + √2 q3
//! f2 = √2 p3 − p2 q1 − p1 q2
//! ```
//!
//! The constrained flow is the Hamiltonian flow of H + λ1 f1 + λ2 f2 with
//! the multipliers fixed by {f_i, H + λ_j f_j} = 0. The generic pipeline
//! below (gradients, Poisson tensor, 2×2 solve) is authoritative; the
//! closed forms serve as regression references and as the fast path for
//! long Lyapunov runs.
//!
//! Coordinates of a reduced point are ordered (q1, q2, p1, p2). The pair
//! (q1, p1) describes the second qubit and (q2, p2) the first.

use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SMatrix, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    phase_to_state, poisson_tensor, symplectic_form, Chart, HomogeneousState, RealPhasePoint,
};
use crate::observables::{
    build_hamiltonian, expectation_real, gradient_expectation, HamiltonianSpec, TwoQubitOperator,
};
use crate::ode::{DormandPrince, OdeSystem, Tolerances};

/// |{f1, f2}| below which the bracket matrix counts as singular.
pub const DEGENERATE_BRACKET: f64 = 1e-10;

const CHART: Chart = Chart::FIRST;

/// Canonical coordinates of a separable state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedPoint {
    pub q1: f64,
    pub q2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl ReducedPoint {
    pub fn new(q1: f64, q2: f64, p1: f64, p2: f64) -> Self {
        ReducedPoint { q1, q2, p1, p2 }
    }

    pub fn origin() -> Self {
        ReducedPoint::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn from_slice(r: &[f64]) -> Self {
        assert_eq!(r.len(), 4, "a reduced point has four coordinates");
        ReducedPoint::new(r[0], r[1], r[2], r[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.q1, self.q2, self.p1, self.p2]
    }

    /// Squared radius of the (q1, p1) pair.
    pub fn r1_sqr(&self) -> f64 {
        self.q1 * self.q1 + self.p1 * self.p1
    }

    /// Squared radius of the (q2, p2) pair.
    pub fn r2_sqr(&self) -> f64 {
        self.q2 * self.q2 + self.p2 * self.p2
    }

    pub fn state(&self) -> HomogeneousState {
        phase_to_state(&embed(self), CHART)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MultiplierPair {
    pub lambda1: f64,
    pub lambda2: f64,
}

/// The graph map (q1, q2, p1, p2) ↦ (q1, q2, q3, p1, p2, p3).
pub fn embed(r: &ReducedPoint) -> RealPhasePoint {
    let q3 = (r.q1 * r.q2 - r.p1 * r.p2) / SQRT_2;
    let p3 = (r.q1 * r.p2 + r.p1 * r.q2) / SQRT_2;
    RealPhasePoint::new(vec![r.q1, r.q2, q3], vec![r.p1, r.p2, p3])
}

/// Drop (q3, p3).
pub fn reduce(x: &RealPhasePoint) -> ReducedPoint {
    assert_eq!(x.dim(), 3);
    ReducedPoint::new(x.q[0], x.q[1], x.p[0], x.p[1])
}

/// d(embed)/dr as a 6×4 matrix.
pub fn embed_jacobian(r: &ReducedPoint) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(6, 4);
    d[(0, 0)] = 1.0;
    d[(1, 1)] = 1.0;
    d[(3, 2)] = 1.0;
    d[(4, 3)] = 1.0;
    d[(2, 0)] = r.q2 / SQRT_2;
    d[(2, 1)] = r.q1 / SQRT_2;
    d[(2, 2)] = -r.p2 / SQRT_2;
    d[(2, 3)] = -r.p1 / SQRT_2;
    d[(5, 0)] = r.p2 / SQRT_2;
    d[(5, 1)] = r.p1 / SQRT_2;
    d[(5, 2)] = r.q2 / SQRT_2;
    d[(5, 3)] = r.q1 / SQRT_2;
    d
}

/// Which constraint pair the 6-D flow enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintVariant {
    #[default]
    Standard,
    /// f2 with q3 in place of p3; used to check that the verification
    /// harness notices a broken constraint.
    Perturbed,
}

pub fn constraint_values(x: &RealPhasePoint) -> (f64, f64) {
    let (q, p) = (&x.q, &x.p);
    let f1 = p[0] * p[1] - q[0] * q[1] + SQRT_2 * q[2];
    let f2 = SQRT_2 * p[2] - p[1] * q[0] - p[0] * q[1];
    (f1, f2)
}

/// Gradients with respect to (q1, q2, q3, p1, p2, p3).
pub fn constraint_gradients(x: &RealPhasePoint) -> [DVector<f64>; 2] {
    constraint_gradients_variant(x, ConstraintVariant::Standard)
}

fn constraint_gradients_variant(
    x: &RealPhasePoint,
    variant: ConstraintVariant,
) -> [DVector<f64>; 2] {
    let (q, p) = (&x.q, &x.p);
    let g1 = DVector::from_vec(vec![-q[1], -q[0], SQRT_2, p[1], p[0], 0.0]);
    let g2 = match variant {
        ConstraintVariant::Standard => {
            DVector::from_vec(vec![-p[1], -p[0], 0.0, -q[1], -q[0], SQRT_2])
        }
        ConstraintVariant::Perturbed => {
            DVector::from_vec(vec![-p[1], -p[0], SQRT_2, -q[1], -q[0], 0.0])
        }
    };
    [g1, g2]
}

/// {F, G} = ∇Fᵀ P ∇G, antisymmetrized so that {F, F} = 0 exactly.
fn bracket(p: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    0.5 * (a.dot(&(p * b)) - b.dot(&(p * a)))
}

fn checked_off_diagonal(value: f64) -> Result<f64> {
    if !(value.abs() >= DEGENERATE_BRACKET) {
        return Err(Error::DegenerateBrackets { value });
    }
    Ok(value)
}

/// The antisymmetric matrix {f_i, f_j}.
pub fn bracket_matrix(x: &RealPhasePoint) -> Result<Matrix2<f64>> {
    let p = poisson_tensor(x)?;
    let [g1, g2] = constraint_gradients(x);
    let b = checked_off_diagonal(bracket(&p, &g1, &g2))?;
    Ok(Matrix2::new(0.0, b, -b, 0.0))
}

fn pair_factor(q: f64, p: f64) -> f64 {
    2.0 + q * q + p * p
}

/// {f1, f2} on the constraint manifold, (A1·A2)²/8 with A_i = 2 + q_i² + p_i².
pub fn bracket_closed(r: &ReducedPoint) -> f64 {
    let a = pair_factor(r.q1, r.p1) * pair_factor(r.q2, r.p2);
    a * a / 8.0
}

fn solve_multipliers(
    p: &DMatrix<f64>,
    grad_h: &DVector<f64>,
    g: &[DVector<f64>; 2],
) -> Result<MultiplierPair> {
    let b = checked_off_diagonal(bracket(p, &g[0], &g[1]))?;
    Ok(MultiplierPair {
        lambda1: bracket(p, &g[1], grad_h) / b,
        lambda2: -bracket(p, &g[0], grad_h) / b,
    })
}

/// Solves {f_i, H} + Σ_j λ_j {f_i, f_j} = 0.
pub fn multipliers_numeric(op: &TwoQubitOperator, x: &RealPhasePoint) -> Result<MultiplierPair> {
    let p = poisson_tensor(x)?;
    let grad_h = gradient_expectation(op, x, CHART);
    solve_multipliers(&p, &grad_h, &constraint_gradients(x))
}

/// Closed-form multipliers for the σx⊗σx coupling of strength `mu`.
pub fn multipliers_closed(mu: f64, x: &RealPhasePoint) -> MultiplierPair {
    let (q1, q2, p1, p2) = (x.q[0], x.q[1], x.p[0], x.p[1]);
    let a1 = pair_factor(q1, p1);
    let a2 = pair_factor(q2, p2);
    let d = a1 * a1 * a2 * a2;
    let n1 = 4.0 * p1 * p2 * q1 * q2
        + (q1 * q1 - 2.0) * (2.0 + p2 * p2 - q2 * q2)
        + p1 * p1 * (q2 * q2 - p2 * p2 - 2.0);
    let n2 = p1 * p1 * p2 * q2 - p2 * q2 * (q1 * q1 - 2.0) + p1 * q1 * (2.0 + p2 * p2 - q2 * q2);
    MultiplierPair {
        lambda1: 4.0 * mu * n1 / d,
        lambda2: 8.0 * mu * n2 / d,
    }
}

/// A real function on the 6-D chart with its gradient.
pub trait PhaseFunction {
    fn value(&self, x: &RealPhasePoint) -> f64;
    fn gradient(&self, x: &RealPhasePoint) -> DVector<f64>;
}

/// ⟨H⟩ in chart 1.
pub struct Expectation<'a>(pub &'a TwoQubitOperator);

impl PhaseFunction for Expectation<'_> {
    fn value(&self, x: &RealPhasePoint) -> f64 {
        expectation_real(self.0, x, CHART)
    }

    fn gradient(&self, x: &RealPhasePoint) -> DVector<f64> {
        gradient_expectation(self.0, x, CHART)
    }
}

/// The k-th coordinate of (q1, q2, q3, p1, p2, p3).
pub struct Coordinate(pub usize);

impl PhaseFunction for Coordinate {
    fn value(&self, x: &RealPhasePoint) -> f64 {
        x.to_vec()[self.0]
    }

    fn gradient(&self, _x: &RealPhasePoint) -> DVector<f64> {
        let mut g = DVector::zeros(6);
        g[self.0] = 1.0;
        g
    }
}

/// f1 (index 0) or f2 (index 1).
pub struct Constraint(pub usize);

impl PhaseFunction for Constraint {
    fn value(&self, x: &RealPhasePoint) -> f64 {
        let (f1, f2) = constraint_values(x);
        [f1, f2][self.0]
    }

    fn gradient(&self, x: &RealPhasePoint) -> DVector<f64> {
        constraint_gradients(x)[self.0].clone()
    }
}

/// A quadratic form ½xᵀAx + bᵀx; handy as a random test function.
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl PhaseFunction for Quadratic {
    fn value(&self, x: &RealPhasePoint) -> f64 {
        let v = x.to_dvector();
        0.5 * v.dot(&(&self.a * &v)) + self.b.dot(&v)
    }

    fn gradient(&self, x: &RealPhasePoint) -> DVector<f64> {
        let v = x.to_dvector();
        0.5 * (&self.a + self.a.transpose()) * v + &self.b
    }
}

pub fn poisson_bracket(
    f: &dyn PhaseFunction,
    g: &dyn PhaseFunction,
    x: &RealPhasePoint,
) -> Result<f64> {
    let p = poisson_tensor(x)?;
    Ok(bracket(&p, &f.gradient(x), &g.gradient(x)))
}

/// {F,G}' = {F,G} + Σ {f_i,F} C⁻¹_ij {f_j,G} with C_ij = {f_i,f_j}.
pub fn dirac_bracket(
    f: &dyn PhaseFunction,
    g: &dyn PhaseFunction,
    x: &RealPhasePoint,
) -> Result<f64> {
    let p = poisson_tensor(x)?;
    let (gf, gg) = (f.gradient(x), g.gradient(x));
    let c = constraint_gradients(x);
    let b = checked_off_diagonal(bracket(&p, &c[0], &c[1]))?;
    // C = [[0, b], [−b, 0]], C⁻¹ = [[0, −1/b], [1/b, 0]]
    let fi_f = [bracket(&p, &c[0], &gf), bracket(&p, &c[1], &gf)];
    let fj_g = [bracket(&p, &c[0], &gg), bracket(&p, &c[1], &gg)];
    let correction = (-fi_f[0] * fj_g[1] + fi_f[1] * fj_g[0]) / b;
    Ok(bracket(&p, &gf, &gg) + correction)
}

/// P(∇H + λ1∇f1 + λ2∇f2) on the full 6-D chart, with the multipliers
/// solved at `x` itself (which need not lie on the manifold).
pub fn full_constrained_field(
    op: &TwoQubitOperator,
    x: &RealPhasePoint,
    variant: ConstraintVariant,
) -> Result<DVector<f64>> {
    let p = poisson_tensor(x)?;
    let grad_h = gradient_expectation(op, x, CHART);
    let g = constraint_gradients_variant(x, variant);
    let lam = solve_multipliers(&p, &grad_h, &g)?;
    Ok(&p * (grad_h + lam.lambda1 * &g[0] + lam.lambda2 * &g[1]))
}

fn take_reduced(v: &DVector<f64>) -> [f64; 4] {
    [v[0], v[1], v[3], v[4]]
}

/// Velocity of (q1, q2, p1, p2) from the multiplier pipeline at embed(r).
pub fn constrained_vector_field(op: &TwoQubitOperator, r: &ReducedPoint) -> Result<[f64; 4]> {
    let v = full_constrained_field(op, &embed(r), ConstraintVariant::Standard)?;
    Ok(take_reduced(&v))
}

/// The Hamiltonian field of H∘embed for the pulled-back symplectic form.
pub fn reduced_symplectic_field(op: &TwoQubitOperator, r: &ReducedPoint) -> Result<[f64; 4]> {
    let x = embed(r);
    let s = 2.0 * symplectic_form(&x).matrix;
    let d = embed_jacobian(r);
    let s_red = d.transpose() * s * &d;
    let rhs = d.transpose() * gradient_expectation(op, &x, CHART);
    let v = s_red.lu().solve(&rhs).ok_or(Error::SingularForm {
        condition: f64::INFINITY,
    })?;
    Ok([v[0], v[1], v[2], v[3]])
}

/// Bloch components of one pair with first and second derivatives in (q, p).
struct BlochPair {
    value: [f64; 3],
    grad: [[f64; 2]; 3],
    hess: [[[f64; 2]; 2]; 3],
}

impl BlochPair {
    fn new(q: f64, p: f64) -> Self {
        let k = 2.0 * SQRT_2;
        let u = 1.0 / pair_factor(q, p);
        let (u2, u3) = (u * u, u * u * u);
        let uq = -2.0 * q * u2;
        let up = -2.0 * p * u2;
        let uqq = -2.0 * u2 + 8.0 * q * q * u3;
        let upp = -2.0 * u2 + 8.0 * p * p * u3;
        let uqp = 8.0 * q * p * u3;
        // x = k q u, y = k p u, z = 4u − 1
        let x_qq = k * (2.0 * uq + q * uqq);
        let x_qp = k * (up + q * uqp);
        let x_pp = k * q * upp;
        let y_qq = k * p * uqq;
        let y_qp = k * (uq + p * uqp);
        let y_pp = k * (2.0 * up + p * upp);
        BlochPair {
            value: [k * q * u, k * p * u, 4.0 * u - 1.0],
            grad: [
                [k * (u + q * uq), k * q * up],
                [k * p * uq, k * (u + p * up)],
                [4.0 * uq, 4.0 * up],
            ],
            hess: [
                [[x_qq, x_qp], [x_qp, x_pp]],
                [[y_qq, y_qp], [y_qp, y_pp]],
                [[4.0 * uqq, 4.0 * uqp], [4.0 * uqp, 4.0 * upp]],
            ],
        }
    }
}

/// The constrained field from the Bloch-sphere form of the separable energy,
/// h = ω(z1 + z2) + Σ_k μ_k b_k b'_k, and its Jacobian in (q1, q2, p1, p2).
pub fn closed_field_and_jacobian(
    spec: &HamiltonianSpec,
    r: &ReducedPoint,
) -> (Vector4<f64>, Matrix4<f64>) {
    let pairs = [BlochPair::new(r.q1, r.p1), BlochPair::new(r.q2, r.p2)];
    let mu = [spec.mu_x, spec.mu_y, spec.mu_z];
    // gradient and Hessian of h in the variable order (q_a, p_a) per pair
    let mut grad = [[0.0; 2]; 2];
    let mut hess = SMatrix::<f64, 4, 4>::zeros(); // order (q1, p1, q2, p2)
    for i in 0..2 {
        let j = 1 - i;
        let (a, b) = (&pairs[i], &pairs[j]);
        for v in 0..2 {
            grad[i][v] = spec.omega * a.grad[2][v]
                + (0..3)
                    .map(|k| mu[k] * a.grad[k][v] * b.value[k])
                    .sum::<f64>();
            for w in 0..2 {
                hess[(2 * i + v, 2 * i + w)] = spec.omega * a.hess[2][v][w]
                    + (0..3)
                        .map(|k| mu[k] * a.hess[k][v][w] * b.value[k])
                        .sum::<f64>();
                hess[(2 * i + v, 2 * j + w)] = (0..3)
                    .map(|k| mu[k] * a.grad[k][v] * b.grad[k][w])
                    .sum::<f64>();
            }
        }
    }
    let qp = [(r.q1, r.p1), (r.q2, r.p2)];
    // local field per pair: q̇ = s ∂h/∂p, ṗ = −s ∂h/∂q with s = A²/4
    let mut field_local = [0.0; 4]; // (q̇1, ṗ1, q̇2, ṗ2)
    let mut jac_local = SMatrix::<f64, 4, 4>::zeros();
    for i in 0..2 {
        let (q, p) = qp[i];
        let a = pair_factor(q, p);
        let s = a * a / 4.0;
        let ds = [a * q, a * p];
        field_local[2 * i] = s * grad[i][1];
        field_local[2 * i + 1] = -s * grad[i][0];
        for col in 0..4 {
            let own = col / 2 == i;
            let dsc = if own { ds[col % 2] } else { 0.0 };
            jac_local[(2 * i, col)] = dsc * grad[i][1] + s * hess[(2 * i + 1, col)];
            jac_local[(2 * i + 1, col)] = -dsc * grad[i][0] - s * hess[(2 * i, col)];
        }
    }
    // permute (q1, p1, q2, p2) → (q1, q2, p1, p2)
    const PERM: [usize; 4] = [0, 2, 1, 3];
    let field = Vector4::from_fn(|k, _| field_local[PERM[k]]);
    let jac = Matrix4::from_fn(|a, b| jac_local[(PERM[a], PERM[b])]);
    (field, jac)
}

/// Energy of a separable state from its Bloch vectors.
pub fn closed_energy(spec: &HamiltonianSpec, r: &ReducedPoint) -> f64 {
    let a = BlochPair::new(r.q1, r.p1);
    let b = BlochPair::new(r.q2, r.p2);
    spec.omega * (a.value[2] + b.value[2])
        + spec.mu_x * a.value[0] * b.value[0]
        + spec.mu_y * a.value[1] * b.value[1]
        + spec.mu_z * a.value[2] * b.value[2]
}

/// How the reduced right-hand side is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldModel {
    /// Multiplier pipeline on the embedded point.
    #[default]
    Pipeline,
    /// Bloch-sphere closed form.
    Closed,
}

/// The reduced flow as an ODE on R⁴.
pub struct ReducedFlow<'a> {
    pub spec: &'a HamiltonianSpec,
    pub op: TwoQubitOperator,
    pub model: FieldModel,
}

impl<'a> ReducedFlow<'a> {
    pub fn new(spec: &'a HamiltonianSpec, model: FieldModel) -> Self {
        ReducedFlow {
            spec,
            op: build_hamiltonian(spec),
            model,
        }
    }

    pub fn field(&self, r: &ReducedPoint) -> Result<[f64; 4]> {
        match self.model {
            FieldModel::Pipeline => constrained_vector_field(&self.op, r),
            FieldModel::Closed => {
                let (v, _) = closed_field_and_jacobian(self.spec, r);
                Ok([v[0], v[1], v[2], v[3]])
            }
        }
    }
}

impl OdeSystem for ReducedFlow<'_> {
    fn dim(&self) -> usize {
        4
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        dy.copy_from_slice(&self.field(&ReducedPoint::from_slice(y))?);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstrainedSample {
    pub t: f64,
    pub r: ReducedPoint,
    pub f1: f64,
    pub f2: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstrainedTrajectory {
    pub samples: Vec<ConstrainedSample>,
    pub tol: f64,
}

impl ConstrainedTrajectory {
    pub fn last(&self) -> &ConstrainedSample {
        self.samples.last().expect("trajectories are never empty")
    }

    pub fn max_energy_drift(&self) -> f64 {
        let e0 = self.samples[0].energy;
        self.samples
            .iter()
            .map(|s| (s.energy - e0).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_constraint_violation(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.f1.abs().max(s.f2.abs()))
            .fold(0.0, f64::max)
    }
}

fn constrained_sample(op: &TwoQubitOperator, t: f64, x: &RealPhasePoint) -> ConstrainedSample {
    let (f1, f2) = constraint_values(x);
    ConstrainedSample {
        t,
        r: reduce(x),
        f1,
        f2,
        energy: expectation_real(op, x, CHART),
    }
}

/// Drives `sys` with DOPRI5, sampling every step or at multiples of
/// `sample_interval`, and maps each state through `record`.
fn drive<S, F>(
    sys: &S,
    y0: &[f64],
    t_end: f64,
    tol: f64,
    sample_interval: Option<f64>,
    mut record: F,
) -> Result<()>
where
    S: OdeSystem,
    F: FnMut(f64, &[f64]),
{
    if !(t_end >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "t_end must be non-negative, got {t_end}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    if let Some(dt) = sample_interval {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(
                "sample interval must be positive".into(),
            ));
        }
    }
    record(0.0, y0);
    if t_end == 0.0 {
        return Ok(());
    }
    let mut dp = DormandPrince::new(sys, 0.0, y0, Tolerances::uniform(tol))?;
    let mut k_out = 1usize;
    while dp.t() < t_end {
        let step = dp.step(sys, t_end)?;
        match sample_interval {
            None => record(step.t1, dp.y()),
            Some(dt) => loop {
                let t_out = k_out as f64 * dt;
                if t_out > step.t1 * (1.0 + 1e-14) {
                    break;
                }
                if (t_out - step.t1).abs() <= 1e-12 * step.t1.max(1.0) {
                    record(t_out, dp.y());
                } else {
                    record(t_out, &step.at(t_out));
                }
                k_out += 1;
            },
        }
    }
    if let Some(dt) = sample_interval {
        let last_out = (k_out - 1) as f64 * dt;
        if (last_out - t_end).abs() > 1e-12 * t_end.max(1.0) {
            record(t_end, dp.y());
        }
    }
    Ok(())
}

/// Integrates the reduced flow; constraint values are evaluated on the
/// embedded point and so vanish to rounding.
pub fn integrate_constrained(
    spec: &HamiltonianSpec,
    r0: &ReducedPoint,
    t_end: f64,
    tol: f64,
) -> Result<ConstrainedTrajectory> {
    integrate_constrained_with(spec, r0, t_end, tol, FieldModel::Pipeline, None)
}

pub fn integrate_constrained_with(
    spec: &HamiltonianSpec,
    r0: &ReducedPoint,
    t_end: f64,
    tol: f64,
    model: FieldModel,
    sample_interval: Option<f64>,
) -> Result<ConstrainedTrajectory> {
    spec.validate()?;
    let sys = ReducedFlow::new(spec, model);
    let mut samples = Vec::new();
    drive(&sys, &r0.to_array(), t_end, tol, sample_interval, |t, y| {
        samples.push(constrained_sample(
            &sys.op,
            t,
            &embed(&ReducedPoint::from_slice(y)),
        ));
    })?;
    Ok(ConstrainedTrajectory { samples, tol })
}

/// The unprojected 6-D constrained flow.
pub struct EmbeddedFlow<'a> {
    pub op: &'a TwoQubitOperator,
    pub variant: ConstraintVariant,
}

impl OdeSystem for EmbeddedFlow<'_> {
    fn dim(&self) -> usize {
        6
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let v = full_constrained_field(self.op, &RealPhasePoint::from_slice(y), self.variant)?;
        dy.copy_from_slice(v.as_slice());
        Ok(())
    }
}

/// Integrates all six coordinates without re-embedding, so that the
/// recorded f1, f2 measure how well the flow itself keeps the constraints.
pub fn integrate_embedded(
    spec: &HamiltonianSpec,
    r0: &ReducedPoint,
    t_end: f64,
    tol: f64,
    variant: ConstraintVariant,
) -> Result<ConstrainedTrajectory> {
    let op = build_hamiltonian(spec);
    let samples = embedded_path(spec, r0, t_end, tol, variant)?
        .into_iter()
        .map(|(t, x)| constrained_sample(&op, t, &x))
        .collect();
    Ok(ConstrainedTrajectory { samples, tol })
}

/// The full six-dimensional states along the unprojected flow, one per accepted step.
pub fn embedded_path(
    spec: &HamiltonianSpec,
    r0: &ReducedPoint,
    t_end: f64,
    tol: f64,
    variant: ConstraintVariant,
) -> Result<Vec<(f64, RealPhasePoint)>> {
    spec.validate()?;
    let op = build_hamiltonian(spec);
    let sys = EmbeddedFlow { op: &op, variant };
    let mut path = Vec::new();
    drive(&sys, &embed(r0).to_vec(), t_end, tol, None, |t, y| {
        path.push((t, RealPhasePoint::from_slice(y)));
    })?;
    Ok(path)
}

/// |c¹c⁴ − c²c³| / ‖c‖².
pub fn quadric_residual(s: &HomogeneousState) -> f64 {
    let c = s.amplitudes();
    (c[0] * c[3] - c[1] * c[2]).norm() / s.norm_sqr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_reduced(rng: &mut ChaCha8Rng, scale: f64) -> ReducedPoint {
        ReducedPoint::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn nonsym() -> HamiltonianSpec {
        HamiltonianSpec::nonsymmetric(1.0, 1.7)
    }

    fn sym() -> HamiltonianSpec {
        HamiltonianSpec::symmetric(1.0, 1.7)
    }

    #[test]
    fn embed_examples() {
        let x = embed(&ReducedPoint::origin());
        assert_eq!(x, RealPhasePoint::origin(3));
        assert!(x.q.iter().chain(&x.p).all(|v| *v == 0.0));

        let x = embed(&ReducedPoint::new(1.0, 1.0, 0.0, 0.0));
        assert_abs_diff_eq!(x.q[2], 1.0 / SQRT_2, epsilon = 1e-15);
        assert_eq!(x.p[2], 0.0);
        assert!(quadric_residual(&phase_to_state(&x, CHART)) < 1e-15);

        let x = embed(&ReducedPoint::new(1.0, 0.0, 0.0, 1.0));
        assert_eq!(x.q[2], 0.0);
        assert_abs_diff_eq!(x.p[2], 1.0 / SQRT_2, epsilon = 1e-15);
        assert!(quadric_residual(&phase_to_state(&x, CHART)) < 1e-15);
    }

    #[test]
    fn embedded_points_satisfy_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let r = random_reduced(&mut rng, 3.0);
            let x = embed(&r);
            let (f1, f2) = constraint_values(&x);
            assert!(f1.abs() <= 1e-12 && f2.abs() <= 1e-12);
            assert!(quadric_residual(&r.state()) <= 1e-12);
            assert_eq!(reduce(&x), r);
        }
    }

    #[test]
    fn constraint_value_examples() {
        assert_eq!(constraint_values(&RealPhasePoint::origin(3)), (0.0, 0.0));
        let x = RealPhasePoint::new(vec![0.0, 0.0, 1.0], vec![0.0; 3]);
        assert_eq!(constraint_values(&x).0, SQRT_2);
    }

    #[test]
    fn constraint_gradients_match_differences() {
        let x = RealPhasePoint::new(vec![0.3, -0.7, 0.2], vec![1.1, 0.4, -0.5]);
        let g = constraint_gradients(&x);
        let v = x.to_vec();
        let h = 1e-6;
        for k in 0..6 {
            let mut a = v.clone();
            let mut b = v.clone();
            a[k] += h;
            b[k] -= h;
            let (fa, fb) = (
                constraint_values(&RealPhasePoint::from_slice(&a)),
                constraint_values(&RealPhasePoint::from_slice(&b)),
            );
            assert_abs_diff_eq!((fa.0 - fb.0) / (2.0 * h), g[0][k], epsilon = 1e-8);
            assert_abs_diff_eq!((fa.1 - fb.1) / (2.0 * h), g[1][k], epsilon = 1e-8);
        }
    }

    #[test]
    fn embed_jacobian_matches_differences() {
        let r = ReducedPoint::new(0.4, -1.2, 0.9, 0.3);
        let d = embed_jacobian(&r);
        let h = 1e-6;
        for k in 0..4 {
            let mut a = r.to_array();
            let mut b = r.to_array();
            a[k] += h;
            b[k] -= h;
            let xa = embed(&ReducedPoint::from_slice(&a)).to_vec();
            let xb = embed(&ReducedPoint::from_slice(&b)).to_vec();
            for i in 0..6 {
                assert_abs_diff_eq!((xa[i] - xb[i]) / (2.0 * h), d[(i, k)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn bracket_matrix_values() {
        let m = bracket_matrix(&RealPhasePoint::origin(3)).unwrap();
        assert_abs_diff_eq!(m[(0, 1)], 2.0, epsilon = 1e-14);
        assert_eq!(m + m.transpose(), Matrix2::zeros());

        let r = ReducedPoint::new(2f64.sqrt(), 0.0, 0.0, 0.0);
        let m = bracket_matrix(&embed(&r)).unwrap();
        assert_abs_diff_eq!(m[(0, 1)], 8.0, epsilon = 1e-13);
        assert_eq!(m + m.transpose(), Matrix2::zeros());
    }

    #[test]
    fn bracket_matrix_matches_closed_form_on_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let r = random_reduced(&mut rng, 2.0);
            let m = bracket_matrix(&embed(&r)).unwrap();
            let c = bracket_closed(&r);
            assert!((m[(0, 1)] - c).abs() <= 1e-10 * c, "{r:?}");
        }
    }

    #[test]
    fn multipliers_at_origin() {
        let op = build_hamiltonian(&nonsym());
        let lam = multipliers_numeric(&op, &RealPhasePoint::origin(3)).unwrap();
        assert_abs_diff_eq!(lam.lambda1, -1.7, epsilon = 1e-14);
        assert_abs_diff_eq!(lam.lambda2, 0.0, epsilon = 1e-14);
        let closed = multipliers_closed(1.7, &RealPhasePoint::origin(3));
        assert_abs_diff_eq!(closed.lambda1, -1.7, epsilon = 1e-15);
        assert_abs_diff_eq!(closed.lambda2, 0.0, epsilon = 1e-15);

        let op = build_hamiltonian(&sym());
        let lam = multipliers_numeric(&op, &RealPhasePoint::origin(3)).unwrap();
        assert!(lam.lambda1.is_finite() && lam.lambda2.is_finite());
    }

    #[test]
    fn multipliers_agree_and_solve_compatibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = build_hamiltonian(&nonsym());
        for _ in 0..200 {
            let x = embed(&random_reduced(&mut rng, 2.0));
            let num = multipliers_numeric(&op, &x).unwrap();
            let cl = multipliers_closed(1.7, &x);
            assert_abs_diff_eq!(num.lambda1, cl.lambda1, epsilon = 1e-12);
            assert_abs_diff_eq!(num.lambda2, cl.lambda2, epsilon = 1e-12);
            // tangency: both constraints are preserved by the field
            let v = full_constrained_field(&op, &x, ConstraintVariant::Standard).unwrap();
            for g in constraint_gradients(&x) {
                assert!(g.dot(&v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn multipliers_vanish_without_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 0.0));
        for _ in 0..20 {
            let x = embed(&random_reduced(&mut rng, 2.0));
            let lam = multipliers_numeric(&op, &x).unwrap();
            assert!(lam.lambda1.abs() < 1e-13 && lam.lambda2.abs() < 1e-13);
            assert_eq!(
                multipliers_closed(0.0, &x),
                MultiplierPair {
                    lambda1: 0.0,
                    lambda2: 0.0
                }
            );
        }
    }

    #[test]
    fn dirac_bracket_examples() {
        let op = build_hamiltonian(&nonsym());
        let h = Expectation(&op);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = embed(&random_reduced(&mut rng, 1.5));
            assert!(dirac_bracket(&Constraint(0), &h, &x).unwrap().abs() <= 1e-10);
            assert!(dirac_bracket(&Constraint(1), &h, &x).unwrap().abs() <= 1e-10);
            assert_eq!(dirac_bracket(&h, &h, &x).unwrap(), 0.0);
        }
        let origin = RealPhasePoint::origin(3);
        let plain = poisson_bracket(&Coordinate(0), &Coordinate(3), &origin).unwrap();
        let dirac = dirac_bracket(&Coordinate(0), &Coordinate(3), &origin).unwrap();
        assert_abs_diff_eq!(plain, dirac, epsilon = 1e-15);
        assert_abs_diff_eq!(plain, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn field_examples() {
        let op = build_hamiltonian(&nonsym());
        let v = constrained_vector_field(&op, &ReducedPoint::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        let expected = [0.0, 0.0, 2.0, -6.8 / 3.0];
        for k in 0..4 {
            assert_abs_diff_eq!(v[k], expected[k], epsilon = 1e-13);
        }
        let op = build_hamiltonian(&sym());
        let v = constrained_vector_field(&op, &ReducedPoint::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        let expected = [0.0, 0.0, 5.4, 0.0];
        for k in 0..4 {
            assert_abs_diff_eq!(v[k], expected[k], epsilon = 1e-13);
        }
        for spec in [nonsym(), sym()] {
            let v = constrained_vector_field(&build_hamiltonian(&spec), &ReducedPoint::origin())
                .unwrap();
            assert!(v.iter().all(|c| c.abs() < 1e-15));
        }
    }

    /// The explicit nonsymmetric equations, with the sign of the ω term of
    /// q̇2 matching its partner q̇1.
    fn nonsymmetric_explicit(w: f64, mu: f64, r: &ReducedPoint) -> [f64; 4] {
        let (q1, q2, p1, p2) = (r.q1, r.q2, r.p1, r.p2);
        let a1 = pair_factor(q1, p1);
        let a2 = pair_factor(q2, p2);
        [
            -(4.0 * mu * p1 * q1 * q2 + 2.0 * w * p1 * a2) / a2,
            -(4.0 * mu * p2 * q1 * q2 + 2.0 * w * p2 * a1) / a1,
            (2.0 * mu * q2 * (q1 * q1 - p1 * p1 - 2.0) + 2.0 * w * q1 * a2) / a2,
            (2.0 * mu * q1 * (q2 * q2 - p2 * p2 - 2.0) + 2.0 * w * q2 * a1) / a1,
        ]
    }

    fn symmetric_explicit(w: f64, mu: f64, r: &ReducedPoint) -> [f64; 4] {
        let (q1, q2, p1, p2) = (r.q1, r.q2, r.p1, r.p2);
        let a1 = pair_factor(q1, p1);
        let a2 = pair_factor(q2, p2);
        [
            (2.0 * mu * p1 * (p2 * p2 + q2 * q2 - 2.0) - 2.0 * w * p1 * a2) / a2,
            (2.0 * mu * p2 * (p1 * p1 + q1 * q1 - 2.0) - 2.0 * w * p2 * a1) / a1,
            (-2.0 * mu * q1 * (q2 * q2 + p2 * p2 - 2.0) + 2.0 * w * q1 * a2) / a2,
            (-2.0 * mu * q2 * (q1 * q1 + p1 * p1 - 2.0) + 2.0 * w * q2 * a1) / a1,
        ]
    }

    #[test]
    fn pipeline_matches_explicit_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (w, mu) = (1.0, 1.7);
        let ns = build_hamiltonian(&nonsym());
        let sy = build_hamiltonian(&sym());
        for _ in 0..100 {
            let r = random_reduced(&mut rng, 2.0);
            let a = constrained_vector_field(&ns, &r).unwrap();
            let b = nonsymmetric_explicit(w, mu, &r);
            let c = constrained_vector_field(&sy, &r).unwrap();
            let d = symmetric_explicit(w, mu, &r);
            for k in 0..4 {
                assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-11);
                assert_abs_diff_eq!(c[k], d[k], epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn pipeline_matches_reduced_symplectic_and_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = HamiltonianSpec {
            omega: 0.8,
            mu_x: 1.3,
            mu_y: -0.6,
            mu_z: 0.9,
        };
        let op = build_hamiltonian(&spec);
        for _ in 0..100 {
            let r = random_reduced(&mut rng, 2.0);
            let a = constrained_vector_field(&op, &r).unwrap();
            let b = reduced_symplectic_field(&op, &r).unwrap();
            let (c, _) = closed_field_and_jacobian(&spec, &r);
            for k in 0..4 {
                assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-10 * (1.0 + a[k].abs()));
                assert_abs_diff_eq!(a[k], c[k], epsilon = 1e-10 * (1.0 + a[k].abs()));
            }
            assert_abs_diff_eq!(
                closed_energy(&spec, &r),
                expectation_real(&op, &embed(&r), CHART),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn closed_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = HamiltonianSpec {
            omega: 1.0,
            mu_x: 1.7,
            mu_y: 0.4,
            mu_z: -0.3,
        };
        for _ in 0..50 {
            let r = random_reduced(&mut rng, 2.0);
            let (_, jac) = closed_field_and_jacobian(&spec, &r);
            let h = 1e-6;
            for k in 0..4 {
                let mut a = r.to_array();
                let mut b = r.to_array();
                a[k] += h;
                b[k] -= h;
                let (fa, _) = closed_field_and_jacobian(&spec, &ReducedPoint::from_slice(&a));
                let (fb, _) = closed_field_and_jacobian(&spec, &ReducedPoint::from_slice(&b));
                for i in 0..4 {
                    let fd = (fa[i] - fb[i]) / (2.0 * h);
                    assert!((fd - jac[(i, k)]).abs() <= 1e-6 * (1.0 + jac[(i, k)].abs()));
                }
            }
        }
    }

    #[test]
    fn symmetric_radii_conserved() {
        let r0 = ReducedPoint::new(0.7, -0.4, 0.2, 0.9);
        let traj = integrate_constrained(&sym(), &r0, 100.0, 1e-12).unwrap();
        let (a, b) = (r0.r1_sqr(), r0.r2_sqr());
        for s in &traj.samples {
            assert!((s.r.r1_sqr() - a).abs() <= 1e-8);
            assert!((s.r.r2_sqr() - b).abs() <= 1e-8);
        }
        assert!(traj.max_energy_drift() <= 1e-8);
    }

    #[test]
    fn zero_horizon_returns_start() {
        let r0 = ReducedPoint::new(0.1, 0.2, 0.3, 0.4);
        let traj = integrate_constrained(&nonsym(), &r0, 0.0, 1e-10).unwrap();
        assert_eq!(traj.samples.len(), 1);
        assert_eq!(traj.samples[0].r, r0);
    }

    #[test]
    fn embedded_flow_keeps_constraints() {
        let r0 = ReducedPoint::new(0.5, -0.3, 0.2, 0.8);
        let traj =
            integrate_embedded(&nonsym(), &r0, 20.0, 1e-12, ConstraintVariant::Standard).unwrap();
        assert!(traj.max_constraint_violation() <= 1e-9);
        assert!(traj.max_energy_drift() <= 1e-9);
        let bad =
            integrate_embedded(&nonsym(), &r0, 20.0, 1e-12, ConstraintVariant::Perturbed).unwrap();
        assert!(bad.max_constraint_violation() > 1e-3);
    }

    #[test]
    fn reduced_and_embedded_flows_agree() {
        let r0 = ReducedPoint::new(0.5, -0.3, 0.2, 0.8);
        let a =
            integrate_constrained_with(&nonsym(), &r0, 5.0, 1e-12, FieldModel::Pipeline, Some(1.0))
                .unwrap();
        let b =
            integrate_constrained_with(&nonsym(), &r0, 5.0, 1e-12, FieldModel::Closed, Some(1.0))
                .unwrap();
        let c =
            integrate_embedded(&nonsym(), &r0, 5.0, 1e-12, ConstraintVariant::Standard).unwrap();
        assert_eq!(a.samples.len(), 6);
        assert_eq!(a.last().t, 5.0);
        for k in 0..4 {
            assert_abs_diff_eq!(
                a.last().r.to_array()[k],
                b.last().r.to_array()[k],
                epsilon = 1e-8
            );
            assert_abs_diff_eq!(
                a.last().r.to_array()[k],
                c.last().r.to_array()[k],
                epsilon = 1e-8
            );
        }
    }
}
