//! Poincaré sections, largest Lyapunov exponents and energy-shell seeding
//! for the constrained two-qubit flow.
//!
//! Sections are taken at q2 = 0 with p2 > 0 on the shell H = h. Long runs
//! use the Bloch-sphere closed form of the constrained field, which agrees
//! with the multiplier pipeline to rounding and comes with an analytic
//! Jacobian for the tangent dynamics.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    closed_energy, closed_field_and_jacobian, FieldModel, ReducedFlow, ReducedPoint,
};
use crate::error::{Error, Result};
use crate::flow::integrate_flow;
use crate::geometry::{
    phase_to_state, real_coords, to_chart, Chart, HomogeneousState, RealPhasePoint,
};
use crate::observables::{HamiltonianSpec, TwoQubitOperator};
use crate::ode::{rk4_step, DormandPrince, OdeSystem, Tolerances};
use crate::roots::illinois;

pub use crate::observables::entanglement_measure;

/// Crossings are polished until |q2| is below this.
pub const SECTION_TOLERANCE: f64 = 1e-10;

/// Upper end of the p2 scan when solving for a shell point.
pub const P2_SCAN_MAX: f64 = 20.0;
const P2_SCAN_POINTS: usize = 400;
const MAX_SEED_ATTEMPTS: usize = 10_000;

/// Sampling box for (q1, p1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedBox {
    pub q1: (f64, f64),
    pub p1: (f64, f64),
}

impl Default for SeedBox {
    fn default() -> Self {
        SeedBox {
            q1: (-2.0, 2.0),
            p1: (-2.0, 2.0),
        }
    }
}

/// Smallest p2 > 0 with H(q1, 0, p1, p2) = h, found by scanning p2 on a
/// grid and refining the first sign change.
pub fn solve_shell_p2(spec: &HamiltonianSpec, h: f64, q1: f64, p1: f64) -> Result<f64> {
    let g = |p2: f64| closed_energy(spec, &ReducedPoint::new(q1, 0.0, p1, p2)) - h;
    let mut a = 0.0;
    let mut ga = g(a);
    for i in 1..=P2_SCAN_POINTS {
        // quadratic spacing resolves small p2
        let s = i as f64 / P2_SCAN_POINTS as f64;
        let b = P2_SCAN_MAX * s * s;
        let gb = g(b);
        if ga == 0.0 && a > 0.0 {
            return Ok(a);
        }
        if ga.signum() != gb.signum() || gb == 0.0 {
            if let Some(root) = illinois(g, a, b, 1e-15, 1e-13) {
                if root > 0.0 {
                    return Ok(root);
                }
            }
        }
        a = b;
        ga = gb;
    }
    Err(Error::ShellEmpty { h })
}

/// Draws (q1, p1) uniformly from `bx` until the shell equation has a root.
pub fn seed_on_shell<R: Rng>(
    spec: &HamiltonianSpec,
    h: f64,
    rng: &mut R,
    bx: &SeedBox,
) -> Result<ReducedPoint> {
    for _ in 0..MAX_SEED_ATTEMPTS {
        let q1 = rng.random_range(bx.q1.0..=bx.q1.1);
        let p1 = rng.random_range(bx.p1.0..=bx.p1.1);
        match solve_shell_p2(spec, h, q1, p1) {
            Ok(p2) => return Ok(ReducedPoint::new(q1, 0.0, p1, p2)),
            Err(Error::ShellEmpty { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::ShellEmpty { h })
}

/// Seed number `index` of the family `base_seed`.
pub fn indexed_seed(
    spec: &HamiltonianSpec,
    h: f64,
    base_seed: u64,
    index: u64,
    bx: &SeedBox,
) -> Result<ReducedPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    seed_on_shell(spec, h, &mut rng, bx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SectionPoint {
    pub index: usize,
    pub t: f64,
    pub q1: f64,
    pub p1: f64,
    pub p2: f64,
    /// Residual q2 after refinement.
    pub q2: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionOptions {
    pub tol: f64,
    /// Give up after this much time even if fewer crossings were found.
    pub t_max: f64,
    pub model: FieldModel,
}

impl Default for SectionOptions {
    fn default() -> Self {
        SectionOptions {
            tol: 1e-11,
            t_max: 1e5,
            model: FieldModel::Closed,
        }
    }
}

/// Newton iteration in time on q2 using short RK4 steps.
fn polish_crossing(sys: &ReducedFlow, t: f64, y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (mut t, mut y) = (t, y.to_vec());
    let mut f = [0.0; 4];
    for _ in 0..8 {
        if y[1].abs() <= 1e-13 {
            break;
        }
        sys.rhs(t, &y, &mut f)?;
        if f[1] == 0.0 {
            break;
        }
        let dt = -y[1] / f[1];
        y = rk4_step(sys, t, &y, dt)?;
        t += dt;
    }
    Ok((t, y))
}

pub fn poincare_section(
    spec: &HamiltonianSpec,
    r0: &ReducedPoint,
    n_crossings: usize,
    opts: &SectionOptions,
) -> Result<Vec<SectionPoint>> {
    spec.validate()?;
    let sys = ReducedFlow::new(spec, opts.model);
    let mut dp = DormandPrince::new(&sys, 0.0, &r0.to_array(), Tolerances::uniform(opts.tol))?;
    let mut out = Vec::with_capacity(n_crossings);
    while out.len() < n_crossings && dp.t() < opts.t_max {
        let step = dp.step(&sys, opts.t_max)?;
        let (q2a, q2b) = (step.y0()[1], dp.y()[1]);
        // a crossing that starts exactly on the section belongs to the previous step
        if q2a == 0.0 || q2a.signum() == q2b.signum() {
            continue;
        }
        let tc = illinois(|t| step.at(t)[1], step.t0, step.t1, 1e-14, 0.0).unwrap_or(step.t1);
        let (tc, y) = polish_crossing(&sys, tc, &step.at(tc))?;
        if y[3] <= 0.0 {
            continue;
        }
        let r = ReducedPoint::from_slice(&y);
        out.push(SectionPoint {
            index: out.len(),
            t: tc,
            q1: r.q1,
            p1: r.p1,
            p2: r.p2,
            q2: r.q2,
            energy: closed_energy(spec, &r),
        });
    }
    Ok(out)
}

/// Largest-exponent estimate with its uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovEstimate {
    pub value: f64,
    /// Standard error from block means of the finite-time estimates.
    pub stderr: f64,
    pub renormalizations: usize,
    pub history: Vec<LyapunovPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovPoint {
    pub t: f64,
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovOptions {
    pub t_total: f64,
    pub renorm_interval: f64,
    pub tol: f64,
    /// Number of blocks for the standard error.
    pub blocks: usize,
}

impl LyapunovOptions {
    pub fn new(t_total: f64, renorm_interval: f64) -> Self {
        LyapunovOptions {
            t_total,
            renorm_interval,
            tol: 1e-10,
            blocks: 20,
        }
    }

    fn validate(&self) -> Result<usize> {
        if !(self.renorm_interval > 0.0 && self.t_total >= self.renorm_interval) {
            return Err(Error::InvalidInput(format!(
                "need 0 < renorm_interval ≤ t_total (got {} and {})",
                self.renorm_interval, self.t_total
            )));
        }
        if !(self.tol > 0.0) || self.blocks < 2 {
            return Err(Error::InvalidInput(
                "tolerance must be positive and blocks ≥ 2".into(),
            ));
        }
        Ok((self.t_total / self.renorm_interval).round() as usize)
    }
}

/// State and tangent vector of the constrained flow, (r, δr) ∈ R⁸.
pub struct TangentFlow<'a> {
    pub spec: &'a HamiltonianSpec,
}

impl OdeSystem for TangentFlow<'_> {
    fn dim(&self) -> usize {
        8
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let (f, j) = closed_field_and_jacobian(self.spec, &ReducedPoint::from_slice(&y[..4]));
        let d = nalgebra::Vector4::new(y[4], y[5], y[6], y[7]);
        let jd = j * d;
        dy[..4].copy_from_slice(f.as_slice());
        dy[4..].copy_from_slice(jd.as_slice());
        Ok(())
    }
}

/// Running mean and block standard error of finite-time rates.
struct RateAccumulator {
    sum: f64,
    count: usize,
    block_len: usize,
    block_sum: f64,
    block_means: Vec<f64>,
}

impl RateAccumulator {
    fn new(total: usize, blocks: usize) -> Self {
        RateAccumulator {
            sum: 0.0,
            count: 0,
            block_len: (total / blocks).max(1),
            block_sum: 0.0,
            block_means: Vec::with_capacity(blocks + 1),
        }
    }

    fn push(&mut self, rate: f64) {
        self.sum += rate;
        self.count += 1;
        self.block_sum += rate;
        if self.count.is_multiple_of(self.block_len) {
            self.block_means
                .push(self.block_sum / self.block_len as f64);
            self.block_sum = 0.0;
        }
    }

    fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    fn stderr(&self) -> f64 {
        let b = &self.block_means;
        if b.len() < 2 {
            return f64::NAN;
        }
        let n = b.len() as f64;
        let m = b.iter().sum::<f64>() / n;
        (b.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ((n - 1.0) * n)).sqrt()
    }
}

/// Benettin estimate of the largest exponent of the constrained flow.
pub fn lyapunov_max(
    spec: &HamiltonianSpec,
    r0: &ReducedPoint,
    opts: &LyapunovOptions,
) -> Result<LyapunovEstimate> {
    spec.validate()?;
    let n = opts.validate()?;
    let sys = TangentFlow { spec };
    let mut y = r0.to_array().to_vec();
    y.extend_from_slice(&[0.5, 0.5, 0.5, 0.5]);
    let mut dp = DormandPrince::new(&sys, 0.0, &y, Tolerances::uniform(opts.tol))?;
    let mut acc = RateAccumulator::new(n, opts.blocks);
    let mut history = Vec::with_capacity(n);
    for k in 1..=n {
        let t_k = k as f64 * opts.renorm_interval;
        while dp.t() < t_k {
            dp.step(&sys, t_k)?;
        }
        let mut y = dp.y().to_vec();
        let norm = y[4..].iter().map(|v| v * v).sum::<f64>().sqrt();
        acc.push(norm.ln() / opts.renorm_interval);
        y[4..].iter_mut().for_each(|v| *v /= norm);
        dp.reset(&sys, t_k, &y)?;
        history.push(LyapunovPoint {
            t: t_k,
            estimate: acc.mean(),
            stderr: acc.stderr(),
        });
    }
    Ok(LyapunovEstimate {
        value: acc.mean(),
        stderr: acc.stderr(),
        renormalizations: n,
        history,
    })
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn unit(c: &[Complex64]) -> Vec<Complex64> {
    let n = inner(c, c).re.sqrt();
    c.iter().map(|a| a / n).collect()
}

/// sin of the Fubini–Study distance between two unit vectors, computed
/// from the component of `b` orthogonal to `a` (accurate for tiny angles),
/// together with that component.
fn orthogonal_part(a: &[Complex64], b: &[Complex64]) -> (f64, Vec<Complex64>) {
    let o = inner(a, b);
    let perp: Vec<Complex64> = b.iter().zip(a).map(|(y, x)| y - x * o).collect();
    (inner(&perp, &perp).re.sqrt(), perp)
}

fn evolve_state(
    op: &TwoQubitOperator,
    s: &[Complex64],
    dt: f64,
    tol: f64,
) -> Result<Vec<Complex64>> {
    let state = HomogeneousState::new(s.to_vec())?;
    let chart = state.best_chart();
    let x: RealPhasePoint = real_coords(&to_chart(&state, chart)?);
    let end = integrate_flow(op, &x, chart, dt, tol)?.last().clone();
    Ok(unit(phase_to_state(&end.x, end.chart).amplitudes()))
}

/// Two-trajectory estimate for the unconstrained flow: a companion state at
/// Fubini–Study distance `d0` is evolved alongside and pulled back to that
/// distance after every interval.
pub fn lyapunov_unconstrained(
    op: &TwoQubitOperator,
    x0: &RealPhasePoint,
    chart: Chart,
    opts: &LyapunovOptions,
    d0: f64,
) -> Result<LyapunovEstimate> {
    let n = opts.validate()?;
    if !(d0 > 0.0 && d0 < 1e-2) {
        return Err(Error::InvalidInput(format!(
            "d0 must lie in (0, 1e-2), got {d0}"
        )));
    }
    let mut a = unit(phase_to_state(x0, chart).amplitudes());
    // a fixed direction, made orthogonal to a
    let probe: Vec<Complex64> = (0..4)
        .map(|k| Complex64::new(1.0 + k as f64, 0.5 - k as f64))
        .collect();
    let (_, dir) = orthogonal_part(&a, &probe);
    let dir = unit(&dir);
    let mut b = unit(
        &a.iter()
            .zip(&dir)
            .map(|(x, d)| x + d * d0)
            .collect::<Vec<_>>(),
    );
    let (mut dist, _) = orthogonal_part(&a, &b);
    let mut acc = RateAccumulator::new(n, opts.blocks);
    let mut history = Vec::with_capacity(n);
    for k in 1..=n {
        a = evolve_state(op, &a, opts.renorm_interval, opts.tol)?;
        b = evolve_state(op, &b, opts.renorm_interval, opts.tol)?;
        let (d, perp) = orthogonal_part(&a, &b);
        acc.push((d / dist).ln() / opts.renorm_interval);
        let dir = unit(&perp);
        b = unit(
            &a.iter()
                .zip(&dir)
                .map(|(x, u)| x + u * d0)
                .collect::<Vec<_>>(),
        );
        dist = orthogonal_part(&a, &b).0;
        history.push(LyapunovPoint {
            t: k as f64 * opts.renorm_interval,
            estimate: acc.mean(),
            stderr: acc.stderr(),
        });
    }
    Ok(LyapunovEstimate {
        value: acc.mean(),
        stderr: acc.stderr(),
        renormalizations: n,
        history,
    })
}

/// Settings for a seed scan on one energy shell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    pub h: f64,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub seed_box: SeedBox,
    pub lyapunov: LyapunovOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: ReducedPoint,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    pub threshold: f64,
    pub fraction: f64,
    /// Ordered by seed index.
    pub seeds: Vec<SeedResult>,
}

/// Estimates for seeds 0..n_seeds, run in parallel, ordered by index.
pub fn scan_seeds(spec: &HamiltonianSpec, opts: &ScanOptions) -> Result<Vec<SeedResult>> {
    if opts.n_seeds == 0 {
        return Err(Error::InvalidInput("n_seeds must be at least 1".into()));
    }
    (0..opts.n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = indexed_seed(spec, opts.h, opts.base_seed, i, &opts.seed_box)?;
            let est = lyapunov_max(spec, &seed, &opts.lyapunov)?;
            Ok(SeedResult {
                seed,
                value: est.value,
                stderr: est.stderr,
            })
        })
        .collect()
}

/// Estimate for the symmetric coupling with the same ω, μ on the same
/// shell, from seed 0 of the scan family.
pub fn symmetric_baseline(spec: &HamiltonianSpec, opts: &ScanOptions) -> Result<LyapunovEstimate> {
    let coupling = spec.mu_x.abs().max(spec.mu_y.abs()).max(spec.mu_z.abs());
    let sym = HamiltonianSpec::symmetric(spec.omega, coupling);
    let seed = indexed_seed(&sym, opts.h, opts.base_seed, 0, &opts.seed_box)?;
    lyapunov_max(&sym, &seed, &opts.lyapunov)
}

/// Fraction of seeds whose estimate exceeds `threshold`; by default ten
/// times the symmetric baseline.
pub fn chaotic_fraction(
    spec: &HamiltonianSpec,
    opts: &ScanOptions,
    threshold: Option<f64>,
) -> Result<ScanResult> {
    let threshold = match threshold {
        Some(t) => t,
        None => 10.0 * symmetric_baseline(spec, opts)?.value.abs(),
    };
    let seeds = scan_seeds(spec, opts)?;
    let hits = seeds.iter().filter(|s| s.value > threshold).count();
    Ok(ScanResult {
        threshold,
        fraction: hits as f64 / seeds.len() as f64,
        seeds,
    })
}
