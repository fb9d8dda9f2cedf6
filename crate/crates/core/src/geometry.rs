//! Coordinates and Kähler structure of the projective state space CPⁿ.
//!
//! A pure state of an N = n + 1 level system is a ray in Cᴺ. Rays are
//! represented by [`HomogeneousState`]; in the chart U_μ (all rays with
//! c^μ ≠ 0) the ray has n inhomogeneous coordinates ζ^ν = c^ν / c^μ
//! ([`ChartPoint`]), and every chart point has 2n real canonical
//! coordinates ζ^ν = (q^ν + i p^ν)/√2 ([`RealPhasePoint`]).
//!
//! The real 2n × 2n matrices of the Fubini–Study metric G, the complex
//! structure J and the symplectic form Ω = J·G are computed in the real
//! coordinates of a chart. Charts are labelled 1..=N as in the usual
//! physics convention.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative modulus below which a chart amplitude is treated as zero.
pub const CHART_EPSILON: f64 = 1e-8;

/// Prefactor k of the Hamiltonian flow ẋ = k·Ω⁻¹∇H.
///
/// With G built from the Fubini–Study metric g_{μν̄} = ∂_μ∂_ν̄ log(1+|ζ|²)
/// and H the normalized expectation ⟨ψ|H|ψ⟩/⟨ψ|ψ⟩, k = 1/2 reproduces the
/// Schrödinger equation i ċ = H c exactly (checked against the matrix
/// exponential in the flow tests).
pub const FLOW_PREFACTOR: f64 = 0.5;

/// Condition number beyond which the symplectic form is reported singular.
pub const MAX_FORM_CONDITION: f64 = 1e12;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Chart label μ ∈ {1, …, N}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Chart(usize);

impl Chart {
    pub const FIRST: Chart = Chart(1);

    /// Panics if `mu == 0`; charts are 1-based.
    pub fn new(mu: usize) -> Self {
        assert!(mu >= 1, "charts are labelled from 1");
        Chart(mu)
    }

    pub fn label(self) -> usize {
        self.0
    }

    /// Zero-based position of the chart amplitude in the homogeneous vector.
    pub fn position(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for Chart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Homogeneous coordinates (c¹, …, cᴺ) of a ray. Equality is projective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogeneousState {
    amplitudes: Vec<Complex64>,
}

impl HomogeneousState {
    /// Rejects the zero vector and non-finite amplitudes.
    pub fn new(amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() < 2 {
            return Err(Error::InvalidInput(
                "a state needs at least two amplitudes".into(),
            ));
        }
        if amplitudes
            .iter()
            .any(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(Error::InvalidInput("non-finite amplitude".into()));
        }
        if amplitudes.iter().all(|c| c.norm() == 0.0) {
            return Err(Error::InvalidInput("the zero vector is not a state".into()));
        }
        Ok(HomogeneousState { amplitudes })
    }

    /// Convenience constructor from real amplitudes.
    pub fn from_real(amplitudes: &[f64]) -> Result<Self> {
        Self::new(amplitudes.iter().map(|&a| Complex64::new(a, 0.0)).collect())
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Representative with unit norm (same ray).
    pub fn normalized(&self) -> Self {
        let n = self.norm_sqr().sqrt();
        HomogeneousState {
            amplitudes: self.amplitudes.iter().map(|c| c / n).collect(),
        }
    }

    /// Multiply the representative by a nonzero scalar.
    pub fn scaled(&self, a: Complex64) -> Self {
        HomogeneousState {
            amplitudes: self.amplitudes.iter().map(|c| c * a).collect(),
        }
    }

    /// |⟨a|b⟩|² / (⟨a|a⟩⟨b|b⟩): 1 for equal rays, 0 for orthogonal ones.
    pub fn fidelity(&self, other: &HomogeneousState) -> f64 {
        assert_eq!(self.dim(), other.dim());
        let overlap: Complex64 = self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum();
        overlap.norm_sqr() / (self.norm_sqr() * other.norm_sqr())
    }

    /// Fubini–Study distance arccos √fidelity between rays, evaluated as
    /// atan2(‖b⊥‖, |⟨a|b⟩|) so that nearby rays keep full precision.
    pub fn fs_distance(&self, other: &HomogeneousState) -> f64 {
        assert_eq!(self.dim(), other.dim());
        let a = self.normalized();
        let b = other.normalized();
        let overlap: Complex64 = a
            .amplitudes
            .iter()
            .zip(&b.amplitudes)
            .map(|(x, y)| x.conj() * y)
            .sum();
        let perp: f64 = a
            .amplitudes
            .iter()
            .zip(&b.amplitudes)
            .map(|(x, y)| (y - overlap * x).norm_sqr())
            .sum::<f64>()
            .sqrt();
        perp.atan2(overlap.norm())
    }

    /// Projective equality up to `tol` in the Fubini–Study distance.
    pub fn same_ray(&self, other: &HomogeneousState, tol: f64) -> bool {
        self.dim() == other.dim() && self.fs_distance(other) <= tol
    }

    /// Chart of the amplitude with the largest modulus.
    pub fn best_chart(&self) -> Chart {
        let (pos, _) = self
            .amplitudes
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bm), (i, c)| {
                let m = c.norm();
                if m > bm {
                    (i, m)
                } else {
                    (bi, bm)
                }
            });
        Chart::new(pos + 1)
    }

    /// |c^μ| / max_ν |c^ν|.
    pub fn relative_modulus(&self, chart: Chart) -> f64 {
        let max = self.amplitudes.iter().map(|c| c.norm()).fold(0.0, f64::max);
        self.amplitudes[chart.position()].norm() / max
    }
}

impl PartialEq for HomogeneousState {
    fn eq(&self, other: &Self) -> bool {
        self.same_ray(other, 1e-12)
    }
}

/// Inhomogeneous coordinates ζ¹..ζⁿ in the chart U_μ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartPoint {
    pub chart: Chart,
    pub coords: Vec<Complex64>,
}

impl ChartPoint {
    pub fn new(chart: Chart, coords: Vec<Complex64>) -> Self {
        assert!(
            chart.label() <= coords.len() + 1,
            "chart {chart} does not exist in CP^{}",
            coords.len()
        );
        ChartPoint { chart, coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// The representative with c^μ = 1.
    pub fn to_homogeneous(&self) -> HomogeneousState {
        from_chart(self)
    }
}

/// Real canonical coordinates (q¹..qⁿ, p¹..pⁿ) of a chart point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealPhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl RealPhasePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        assert_eq!(q.len(), p.len(), "q and p must have equal length");
        RealPhasePoint { q, p }
    }

    pub fn origin(n: usize) -> Self {
        RealPhasePoint {
            q: vec![0.0; n],
            p: vec![0.0; n],
        }
    }

    /// From the stacked vector x = (q, p).
    pub fn from_slice(x: &[f64]) -> Self {
        assert!(
            x.len().is_multiple_of(2),
            "phase vector must have even length"
        );
        let n = x.len() / 2;
        RealPhasePoint {
            q: x[..n].to_vec(),
            p: x[n..].to_vec(),
        }
    }

    /// Half the real dimension.
    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// The stacked vector x = (q¹..qⁿ, p¹..pⁿ).
    pub fn to_vec(&self) -> Vec<f64> {
        self.q.iter().chain(&self.p).copied().collect()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_vec(self.to_vec())
    }

    /// Σ (q² + p²) + 2, the recurring denominator of the CP³ formulas.
    pub fn a_factor(&self) -> f64 {
        self.q.iter().chain(&self.p).map(|v| v * v).sum::<f64>() + 2.0
    }
}

/// Which geometric object a [`StructureMatrix`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureRole {
    Metric,
    Symplectic,
    SymplecticInverse,
    ComplexStructure,
}

/// A 2n × 2n real matrix tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrix {
    pub role: StructureRole,
    pub matrix: DMatrix<f64>,
}

impl StructureMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Ω(u, v) = uᵀ M v.
    pub fn pair(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        u.dot(&(&self.matrix * v))
    }
}

/// Inhomogeneous coordinates of `s` in chart `chart`.
pub fn to_chart(s: &HomogeneousState, chart: Chart) -> Result<ChartPoint> {
    let amps = s.amplitudes();
    if chart.label() > amps.len() {
        return Err(Error::InvalidInput(format!(
            "chart {chart} out of range for a {}-level state",
            amps.len()
        )));
    }
    let rel = s.relative_modulus(chart);
    if rel <= CHART_EPSILON {
        return Err(Error::ChartSingular {
            chart: chart.label(),
            modulus: rel,
        });
    }
    let pivot = amps[chart.position()];
    let coords = amps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != chart.position())
        .map(|(_, c)| c / pivot)
        .collect();
    Ok(ChartPoint { chart, coords })
}

/// Representative with c^μ = 1 and the remaining amplitudes taken from ζ.
pub fn from_chart(z: &ChartPoint) -> HomogeneousState {
    let mut amplitudes = Vec::with_capacity(z.coords.len() + 1);
    amplitudes.extend_from_slice(&z.coords[..z.chart.position()]);
    amplitudes.push(Complex64::new(1.0, 0.0));
    amplitudes.extend_from_slice(&z.coords[z.chart.position()..]);
    HomogeneousState { amplitudes }
}

/// Coordinates of the same ray in chart `target`, by the holomorphic
/// rescaling ζ_{μ′} = (c^μ / c^{μ′}) ζ_μ.
pub fn transition(z: &ChartPoint, target: Chart) -> Result<ChartPoint> {
    let n = z.coords.len();
    if target.label() > n + 1 {
        return Err(Error::InvalidInput(format!(
            "chart {target} out of range for CP^{n}"
        )));
    }
    if target == z.chart {
        return Ok(z.clone());
    }
    // ξ with ξ^μ = 1 in full homogeneous indexing; c^μ / c^{μ'} = 1 / ξ^{μ'}.
    let xi = |pos: usize| -> Complex64 {
        match pos.cmp(&z.chart.position()) {
            std::cmp::Ordering::Less => z.coords[pos],
            std::cmp::Ordering::Equal => Complex64::new(1.0, 0.0),
            std::cmp::Ordering::Greater => z.coords[pos - 1],
        }
    };
    let max = (0..=n).map(|i| xi(i).norm()).fold(0.0, f64::max);
    let pivot = xi(target.position());
    if pivot.norm() <= CHART_EPSILON * max {
        return Err(Error::ChartSingular {
            chart: target.label(),
            modulus: pivot.norm() / max,
        });
    }
    let ratio = pivot.inv();
    let coords = (0..=n)
        .filter(|&i| i != target.position())
        .map(|i| xi(i) * ratio)
        .collect();
    Ok(ChartPoint {
        chart: target,
        coords,
    })
}

/// q^ν = √2 Re ζ^ν, p^ν = √2 Im ζ^ν.
pub fn real_coords(z: &ChartPoint) -> RealPhasePoint {
    RealPhasePoint {
        q: z.coords.iter().map(|c| SQRT_2 * c.re).collect(),
        p: z.coords.iter().map(|c| SQRT_2 * c.im).collect(),
    }
}

/// ζ^ν = (q^ν + i p^ν)/√2 in chart `chart`.
pub fn complex_coords(x: &RealPhasePoint, chart: Chart) -> ChartPoint {
    ChartPoint::new(
        chart,
        x.q.iter()
            .zip(&x.p)
            .map(|(&q, &p)| Complex64::new(q, p) / SQRT_2)
            .collect(),
    )
}

/// Homogeneous representative of a real phase point in `chart`.
pub fn phase_to_state(x: &RealPhasePoint, chart: Chart) -> HomogeneousState {
    from_chart(&complex_coords(x, chart))
}

/// Hermitian n×n matrix g_{μν̄} = (δ_{μν}(1+|ζ|²) − ζ̄^μ ζ^ν)/(1+|ζ|²)².
pub fn hermitian_metric(zeta: &[Complex64]) -> DMatrix<Complex64> {
    let n = zeta.len();
    let s = 1.0 + zeta.iter().map(|z| z.norm_sqr()).sum::<f64>();
    let s2 = s * s;
    DMatrix::from_fn(n, n, |mu, nu| {
        let delta = if mu == nu { s } else { 0.0 };
        (Complex64::new(delta, 0.0) - zeta[mu].conj() * zeta[nu]) / s2
    })
}

/// Fubini–Study metric in the real coordinates (q, p).
///
/// G_{ij} = Re Σ g_{μν̄} ∂ζ^μ/∂x^i ∂ζ̄^ν/∂x^j, i.e. the real form of
/// ½ (g dζ⊗dζ̄ + c.c.).
pub fn fubini_study_metric(x: &RealPhasePoint) -> StructureMatrix {
    let n = x.dim();
    let zeta: Vec<Complex64> =
        x.q.iter()
            .zip(&x.p)
            .map(|(&q, &p)| Complex64::new(q, p) / SQRT_2)
            .collect();
    let g = hermitian_metric(&zeta);
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for a in 0..n {
        for b in 0..n {
            let gab = g[(a, b)];
            m[(a, b)] = 0.5 * gab.re;
            m[(n + a, n + b)] = 0.5 * gab.re;
            m[(a, n + b)] = 0.5 * gab.im;
            m[(n + a, b)] = -0.5 * gab.im;
        }
    }
    StructureMatrix {
        role: StructureRole::Metric,
        matrix: m,
    }
}

/// J = [[0, −1], [1, 0]] in the (q, p) block ordering.
pub fn complex_structure(n: usize) -> StructureMatrix {
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        m[(i, n + i)] = -1.0;
        m[(n + i, i)] = 1.0;
    }
    StructureMatrix {
        role: StructureRole::ComplexStructure,
        matrix: m,
    }
}

/// Ω = J·G.
pub fn symplectic_form(x: &RealPhasePoint) -> StructureMatrix {
    let j = complex_structure(x.dim());
    let g = fubini_study_metric(x);
    StructureMatrix {
        role: StructureRole::Symplectic,
        matrix: j.matrix * g.matrix,
    }
}

/// Ω⁻¹, failing with [`Error::SingularForm`] when badly conditioned.
pub fn symplectic_inverse(x: &RealPhasePoint) -> Result<StructureMatrix> {
    invert_form(&symplectic_form(x).matrix).map(|matrix| StructureMatrix {
        role: StructureRole::SymplecticInverse,
        matrix,
    })
}

/// The Poisson tensor k·Ω⁻¹ of the calibrated flow; {F, G} = ∇Fᵀ P ∇G.
pub fn poisson_tensor(x: &RealPhasePoint) -> Result<DMatrix<f64>> {
    Ok(symplectic_inverse(x)?.matrix * FLOW_PREFACTOR)
}

pub(crate) fn invert_form(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let norm1 = |a: &DMatrix<f64>| {
        a.column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let inv = m.clone().lu().try_inverse().ok_or(Error::SingularForm {
        condition: f64::INFINITY,
    })?;
    let condition = norm1(m) * norm1(&inv);
    if !condition.is_finite() || condition > MAX_FORM_CONDITION {
        return Err(Error::SingularForm { condition });
    }
    Ok(inv)
}
