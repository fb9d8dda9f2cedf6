//! The unconstrained Hamiltonian flow on CP³ and its Schrödinger oracle.
//!
//! In the real coordinates of a chart the flow is ẋ = k·Ω⁻¹∇H with the
//! prefactor k = [`FLOW_PREFACTOR`](crate::geometry::FLOW_PREFACTOR). Trajectories switch to the chart of
//! the largest amplitude whenever the current chart amplitude drops below
//! [`CHART_SWITCH_THRESHOLD`] of the largest one.

use nalgebra::{DVector, Matrix4, Vector4};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    phase_to_state, poisson_tensor, real_coords, to_chart, Chart, HomogeneousState, RealPhasePoint,
};
use crate::observables::{expectation_real, gradient_expectation, TwoQubitOperator};
use crate::ode::{rk4_step, DenseStep, DormandPrince, OdeSystem, Tolerances};

/// Relative chart amplitude below which a trajectory changes chart.
pub const CHART_SWITCH_THRESHOLD: f64 = 0.5;

/// ẋ = k·Ω⁻¹∇H at `x` in `chart`.
pub fn vector_field(
    op: &TwoQubitOperator,
    x: &RealPhasePoint,
    chart: Chart,
) -> Result<DVector<f64>> {
    let grad = gradient_expectation(op, x, chart);
    Ok(poisson_tensor(x)? * grad)
}

/// The flow in one fixed chart as an ODE system on R⁶.
pub struct ChartFlow<'a> {
    pub op: &'a TwoQubitOperator,
    pub chart: Chart,
}

impl OdeSystem for ChartFlow<'_> {
    fn dim(&self) -> usize {
        6
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let v = vector_field(self.op, &RealPhasePoint::from_slice(y), self.chart)?;
        dy.copy_from_slice(v.as_slice());
        Ok(())
    }
}

/// One recorded point of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowSample {
    pub t: f64,
    pub x: RealPhasePoint,
    pub chart: Chart,
    pub energy: f64,
}

impl FlowSample {
    pub fn state(&self) -> HomogeneousState {
        phase_to_state(&self.x, self.chart)
    }
}

/// Time-ordered samples of an integrated orbit.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub samples: Vec<FlowSample>,
    pub tol: f64,
    pub chart_switches: usize,
}

impl Trajectory {
    pub fn last(&self) -> &FlowSample {
        self.samples.last().expect("trajectories are never empty")
    }

    /// max_t |H(t) − H(0)|.
    pub fn max_energy_drift(&self) -> f64 {
        let e0 = self.samples[0].energy;
        self.samples
            .iter()
            .map(|s| (s.energy - e0).abs())
            .fold(0.0, f64::max)
    }
}

/// Integration scheme for [`integrate_flow_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Dormand–Prince 5(4) with rtol = atol = tol.
    Adaptive { tol: f64 },
    /// Classical RK4 with a fixed step; bit-reproducible.
    FixedRk4 { step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub method: Method,
    /// Record at multiples of this interval; `None` records every step.
    pub sample_interval: Option<f64>,
}

impl FlowOptions {
    pub fn adaptive(tol: f64) -> Self {
        FlowOptions {
            method: Method::Adaptive { tol },
            sample_interval: None,
        }
    }

    pub fn sampled(mut self, interval: f64) -> Self {
        self.sample_interval = Some(interval);
        self
    }
}

fn sample(op: &TwoQubitOperator, t: f64, y: &[f64], chart: Chart) -> FlowSample {
    let x = RealPhasePoint::from_slice(y);
    let energy = expectation_real(op, &x, chart);
    FlowSample {
        t,
        x,
        chart,
        energy,
    }
}

/// Move `y` to the best chart if the current one is getting close to its
/// boundary. Returns the (possibly new) chart and coordinates.
fn maybe_switch(y: &[f64], chart: Chart) -> Result<Option<(Chart, Vec<f64>)>> {
    let state = phase_to_state(&RealPhasePoint::from_slice(y), chart);
    if state.relative_modulus(chart) >= CHART_SWITCH_THRESHOLD {
        return Ok(None);
    }
    let best = state.best_chart();
    let x = real_coords(&to_chart(&state, best)?);
    Ok(Some((best, x.to_vec())))
}

/// Adaptive integration with default sampling (every accepted step).
pub fn integrate_flow(
    op: &TwoQubitOperator,
    x0: &RealPhasePoint,
    chart: Chart,
    t_end: f64,
    tol: f64,
) -> Result<Trajectory> {
    integrate_flow_with(op, x0, chart, t_end, &FlowOptions::adaptive(tol))
}

pub fn integrate_flow_with(
    op: &TwoQubitOperator,
    x0: &RealPhasePoint,
    chart: Chart,
    t_end: f64,
    opts: &FlowOptions,
) -> Result<Trajectory> {
    if !(t_end >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "t_end must be non-negative, got {t_end}"
        )));
    }
    if let Some(dt) = opts.sample_interval {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(
                "sample interval must be positive".into(),
            ));
        }
    }
    let mut chart = chart;
    let mut y = x0.to_vec();
    let mut switches = 0;
    if let Some((c, x)) = maybe_switch(&y, chart)? {
        chart = c;
        y = x;
        switches += 1;
    }
    let mut samples = vec![sample(op, 0.0, &y, chart)];
    match opts.method {
        Method::Adaptive { tol } => {
            if !(tol > 0.0) {
                return Err(Error::InvalidInput("tolerance must be positive".into()));
            }
            if t_end == 0.0 {
                return Ok(Trajectory {
                    samples,
                    tol,
                    chart_switches: switches,
                });
            }
            let mut sys = ChartFlow { op, chart };
            let mut dp = DormandPrince::new(&sys, 0.0, &y, Tolerances::uniform(tol))?;
            let mut next_out = opts.sample_interval.unwrap_or(0.0);
            let mut k_out = 1usize;
            while dp.t() < t_end {
                let step: DenseStep = dp.step(&sys, t_end)?;
                match opts.sample_interval {
                    None => {}
                    Some(dt) => {
                        while next_out <= step.t1 * (1.0 + 1e-14)
                            && next_out <= t_end * (1.0 + 1e-14)
                        {
                            let yo = if (next_out - step.t1).abs() <= 1e-12 * step.t1.abs().max(1.0)
                            {
                                dp.y().to_vec()
                            } else {
                                step.at(next_out)
                            };
                            samples.push(sample(op, next_out, &yo, chart));
                            k_out += 1;
                            next_out = k_out as f64 * dt;
                        }
                    }
                }
                if let Some((c, x)) = maybe_switch(dp.y(), chart)? {
                    chart = c;
                    sys = ChartFlow { op, chart };
                    let t = dp.t();
                    dp.reset(&sys, t, &x)?;
                    switches += 1;
                }
                if opts.sample_interval.is_none() {
                    samples.push(sample(op, dp.t(), dp.y(), chart));
                }
            }
            if opts.sample_interval.is_some() && samples.last().map(|s| s.t) != Some(t_end) {
                samples.push(sample(op, t_end, dp.y(), chart));
            }
            Ok(Trajectory {
                samples,
                tol,
                chart_switches: switches,
            })
        }
        Method::FixedRk4 { step } => {
            if !(step > 0.0) {
                return Err(Error::InvalidInput("step must be positive".into()));
            }
            let n_steps = (t_end / step).round() as usize;
            let every = opts
                .sample_interval
                .map(|dt| ((dt / step).round() as usize).max(1))
                .unwrap_or(1);
            for i in 0..n_steps {
                let t = i as f64 * step;
                y = rk4_step(&ChartFlow { op, chart }, t, &y, step)?;
                if let Some((c, x)) = maybe_switch(&y, chart)? {
                    chart = c;
                    y = x;
                    switches += 1;
                }
                if (i + 1) % every == 0 || i + 1 == n_steps {
                    samples.push(sample(op, (i + 1) as f64 * step, &y, chart));
                }
            }
            Ok(Trajectory {
                samples,
                tol: 0.0,
                chart_switches: switches,
            })
        }
    }
}

/// exp(−iHt) through the eigendecomposition of H.
#[derive(Debug, Clone)]
pub struct Propagator {
    eigenvalues: Vector4<f64>,
    eigenvectors: Matrix4<Complex64>,
}

impl Propagator {
    pub fn new(op: &TwoQubitOperator) -> Self {
        let eig = op.matrix().symmetric_eigen();
        Propagator {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        }
    }

    pub fn evolve(&self, c0: &[Complex64], t: f64) -> [Complex64; 4] {
        let v = &self.eigenvectors;
        let c = Vector4::from_column_slice(c0);
        let mut coeff = v.adjoint() * c;
        for (k, a) in coeff.iter_mut().enumerate() {
            *a *= Complex64::from_polar(1.0, -self.eigenvalues[k] * t);
        }
        let out = v * coeff;
        [out[0], out[1], out[2], out[3]]
    }
}

/// c(t) = exp(−iHt) c0.
pub fn schrodinger_exact(op: &TwoQubitOperator, c0: &HomogeneousState, t: f64) -> HomogeneousState {
    assert_eq!(c0.dim(), 4);
    let out = Propagator::new(op).evolve(c0.amplitudes(), t);
    HomogeneousState::new(out.to_vec()).expect("unitary evolution of a nonzero vector")
}

/// Largest chart-coordinate deviation (max norm over q, p) between the
/// geometric flow and the projected Schrödinger evolution, sampled every
/// `sample_interval` up to `t_end`.
pub fn calibrate_and_compare(
    op: &TwoQubitOperator,
    x0: &RealPhasePoint,
    chart: Chart,
    t_end: f64,
    tol: f64,
    sample_interval: f64,
) -> Result<f64> {
    let traj = integrate_flow_with(
        op,
        x0,
        chart,
        t_end,
        &FlowOptions::adaptive(tol).sampled(sample_interval),
    )?;
    let prop = Propagator::new(op);
    let c0 = phase_to_state(x0, chart);
    let mut worst: f64 = 0.0;
    for s in &traj.samples {
        let exact = HomogeneousState::new(prop.evolve(c0.amplitudes(), s.t).to_vec())?;
        let xe = real_coords(&to_chart(&exact, s.chart)?);
        for (a, b) in s.x.to_vec().iter().zip(xe.to_vec()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Velocity of the projected Schrödinger equation in chart coordinates,
/// ζ̇ = −i[(Hc)_ν − ζ^ν (Hc)_μ] for c with c^μ = 1. Independent of Ω.
pub fn projected_schrodinger_velocity(
    op: &TwoQubitOperator,
    x: &RealPhasePoint,
    chart: Chart,
) -> DVector<f64> {
    let c = phase_to_state(x, chart);
    let amps = c.amplitudes();
    let hc = op.apply(amps);
    let pivot = hc[chart.position()];
    let n = x.dim();
    let mut v = DVector::zeros(2 * n);
    for nu in 0..n {
        let k = if nu < chart.position() { nu } else { nu + 1 };
        let zdot = -Complex64::i() * (hc[k] - amps[k] * pivot);
        v[nu] = std::f64::consts::SQRT_2 * zdot.re;
        v[n + nu] = std::f64::consts::SQRT_2 * zdot.im;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::{build_hamiltonian, HamiltonianSpec};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{PI, SQRT_2};

    fn x(q: [f64; 3], p: [f64; 3]) -> RealPhasePoint {
        RealPhasePoint::new(q.to_vec(), p.to_vec())
    }

    #[test]
    fn symmetric_field_is_linear_rotation() {
        let op = build_hamiltonian(&HamiltonianSpec::symmetric(1.0, 1.7));
        let v = vector_field(&op, &x([0.0; 3], [1.0, 0.0, 0.0]), Chart::new(1)).unwrap();
        let expected = [-5.4, 0.0, 0.0, 0.0, 0.0, 0.0];
        for i in 0..6 {
            assert_abs_diff_eq!(v[i], expected[i], epsilon = 1e-13);
        }
        let v = vector_field(&op, &RealPhasePoint::origin(3), Chart::new(1)).unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-15));
    }

    /// q̇ = −2(ω+μ)p, ṗ = 2(ω+μ)q for the first two pairs and ±4ω for the third.
    #[test]
    fn symmetric_field_matches_linear_system() {
        let (w, mu) = (1.0, 1.7);
        let op = build_hamiltonian(&HamiltonianSpec::symmetric(w, mu));
        let pt = x([0.3, -0.5, 0.8], [0.1, 0.6, -0.2]);
        let v = vector_field(&op, &pt, Chart::new(1)).unwrap();
        let r = 2.0 * (w + mu);
        let expected = [
            -r * pt.p[0],
            -r * pt.p[1],
            -4.0 * w * pt.p[2],
            r * pt.q[0],
            r * pt.q[1],
            4.0 * w * pt.q[2],
        ];
        for i in 0..6 {
            assert_abs_diff_eq!(v[i], expected[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn nonsymmetric_field_at_origin() {
        let op = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let v = vector_field(&op, &RealPhasePoint::origin(3), Chart::new(1)).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(v[i], 0.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(v[5], -2.0 * 1.7 / SQRT_2, epsilon = 1e-14);
    }

    /// Explicit nonsymmetric equations; the μ term of q̇² involves p¹,
    /// mirroring μp² in q̇¹.
    #[test]
    fn nonsymmetric_field_matches_explicit_equations() {
        let (w, mu) = (1.0, 1.7);
        let op = build_hamiltonian(&HamiltonianSpec::nonsymmetric(w, mu));
        let pt = x([0.3, -0.5, 0.8], [0.1, 0.6, -0.2]);
        let (q, p) = (&pt.q, &pt.p);
        let v = vector_field(&op, &pt, Chart::new(1)).unwrap();
        let expected = [
            -2.0 * w * p[0] + mu * p[1] - mu * (p[2] * q[0] + p[0] * q[2]) / SQRT_2,
            -2.0 * w * p[1] + mu * p[0] - mu * (p[2] * q[1] + p[1] * q[2]) / SQRT_2,
            -4.0 * w * p[2] - SQRT_2 * mu * p[2] * q[2],
            2.0 * w * q[0] - mu * q[1] + mu * (q[2] * q[0] - p[0] * p[2]) / SQRT_2,
            2.0 * w * q[1] - mu * q[0] + mu * (q[2] * q[1] - p[1] * p[2]) / SQRT_2,
            4.0 * w * q[2] + mu * (q[2] * q[2] - p[2] * p[2] - 2.0) / SQRT_2,
        ];
        for i in 0..6 {
            assert_abs_diff_eq!(v[i], expected[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn geometric_field_equals_projected_schrodinger() {
        let spec = HamiltonianSpec {
            omega: 0.7,
            mu_x: 1.1,
            mu_y: -0.3,
            mu_z: 0.4,
        };
        let op = build_hamiltonian(&spec);
        let pt = x([0.9, -0.1, 0.4], [-0.7, 0.2, 1.3]);
        for mu in 1..=4 {
            let a = vector_field(&op, &pt, Chart::new(mu)).unwrap();
            let b = projected_schrodinger_velocity(&op, &pt, Chart::new(mu));
            assert!((a - b).amax() < 1e-12, "chart {mu}");
        }
    }

    #[test]
    fn circle_period() {
        let (w, mu) = (1.0, 1.7);
        let op = build_hamiltonian(&HamiltonianSpec::symmetric(w, mu));
        let x0 = x([0.6, 0.0, 0.0], [0.0, 0.0, 0.0]);
        let period = PI / (w + mu);
        let traj = integrate_flow(&op, &x0, Chart::new(1), period, 1e-12).unwrap();
        let end = traj.last();
        assert_eq!(end.t, period);
        assert_eq!(end.chart, Chart::new(1));
        for (a, b) in end.x.to_vec().iter().zip(x0.to_vec()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-8);
        }
        for s in &traj.samples {
            let r2 = s.x.q[0].powi(2) + s.x.p[0].powi(2);
            assert_abs_diff_eq!(r2, 0.36, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_horizon() {
        let op = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let x0 = x([0.1, 0.2, 0.3], [0.4, 0.5, 0.6]);
        let traj = integrate_flow(&op, &x0, Chart::new(1), 0.0, 1e-10).unwrap();
        assert_eq!(traj.samples.len(), 1);
        assert_eq!(traj.samples[0].x, x0);
        assert_eq!(traj.samples[0].t, 0.0);
    }

    #[test]
    fn invalid_horizon_rejected() {
        let op = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let x0 = RealPhasePoint::origin(3);
        assert!(integrate_flow(&op, &x0, Chart::new(1), -1.0, 1e-10).is_err());
        assert!(integrate_flow(&op, &x0, Chart::new(1), 1.0, 0.0).is_err());
    }

    #[test]
    fn energy_conserved_long_run() {
        let op = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let x0 = x([0.4, -0.3, 0.2], [0.1, 0.5, -0.6]);
        let traj = integrate_flow(&op, &x0, Chart::new(1), 100.0, 1e-12).unwrap();
        assert!(
            traj.max_energy_drift() <= 1e-9,
            "drift {:e}",
            traj.max_energy_drift()
        );
    }

    #[test]
    fn charts_switch_through_the_boundary() {
        // σx⊗σx rotates |↑↑⟩ fully into |↓↓⟩, which chart 1 cannot hold.
        let op = build_hamiltonian(&HamiltonianSpec::nonsymmetric(0.0, 1.0));
        let x0 = RealPhasePoint::origin(3);
        let traj = integrate_flow(&op, &x0, Chart::new(1), 3.0, 1e-11).unwrap();
        assert!(traj.chart_switches >= 2);
        assert!(traj.samples.iter().any(|s| s.chart == Chart::new(4)));
        for s in &traj.samples {
            assert!(s.state().relative_modulus(s.chart) >= CHART_SWITCH_THRESHOLD);
        }
        let exact = schrodinger_exact(&op, &phase_to_state(&x0, Chart::new(1)), 3.0);
        assert!(traj.last().state().same_ray(&exact, 1e-8));
    }

    #[test]
    fn exact_evolution_basics() {
        let op = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let c0 = HomogeneousState::new(vec![
            Complex64::new(0.2, 0.1),
            Complex64::new(-0.4, 0.3),
            Complex64::new(0.5, -0.2),
            Complex64::new(0.1, 0.6),
        ])
        .unwrap();
        let same = schrodinger_exact(&op, &c0, 0.0);
        for (a, b) in same.amplitudes().iter().zip(c0.amplitudes()) {
            assert!((a - b).norm() < 1e-14);
        }
        let later = schrodinger_exact(&op, &c0, 7.3);
        assert_abs_diff_eq!(later.norm_sqr(), c0.norm_sqr(), epsilon = 1e-12);

        let sym = build_hamiltonian(&HamiltonianSpec::symmetric(1.0, 1.7));
        let eigen = HomogeneousState::from_real(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        let evolved = schrodinger_exact(&sym, &eigen, 4.2);
        assert!(evolved.same_ray(&eigen, 1e-12));
        // ⟨↑↓|H|↑↓⟩ = −μ
        let phase = Complex64::from_polar(1.0, 1.7 * 4.2);
        assert!((evolved.amplitudes()[1] - phase).norm() < 1e-12);
    }

    #[test]
    fn oracle_equivalence_decoupled() {
        let op = build_hamiltonian(&HamiltonianSpec::symmetric(1.0, 0.0));
        let x0 = x([0.3, 0.4, -0.2], [0.1, -0.5, 0.3]);
        let dev = calibrate_and_compare(&op, &x0, Chart::new(1), 10.0, 1e-12, 0.1).unwrap();
        assert!(dev <= 1e-8, "deviation {dev:e}");
    }

    #[test]
    fn oracle_equivalence_coupled() {
        for spec in [
            HamiltonianSpec::symmetric(1.0, 1.7),
            HamiltonianSpec::nonsymmetric(1.0, 1.7),
        ] {
            let op = build_hamiltonian(&spec);
            let x0 = x([0.5, -0.2, 0.1], [-0.3, 0.4, 0.2]);
            let dev = calibrate_and_compare(&op, &x0, Chart::new(1), 10.0, 1e-10, 0.05).unwrap();
            assert!(dev <= 1e-6, "{spec:?}: deviation {dev:e}");
        }
    }

    #[test]
    fn fixed_step_is_reproducible_and_accurate() {
        let op = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let x0 = x([0.2, 0.1, -0.3], [0.4, -0.1, 0.2]);
        let opts = FlowOptions {
            method: Method::FixedRk4 { step: 1e-3 },
            sample_interval: Some(0.1),
        };
        let a = integrate_flow_with(&op, &x0, Chart::new(1), 2.0, &opts).unwrap();
        let b = integrate_flow_with(&op, &x0, Chart::new(1), 2.0, &opts).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.samples.len(), 21);
        let exact = schrodinger_exact(&op, &phase_to_state(&x0, Chart::new(1)), 2.0);
        assert!(a.last().state().same_ray(&exact, 1e-9));
    }
}
