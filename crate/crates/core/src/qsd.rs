//! Quantum state diffusion with a diagonal Hermitian Lindblad operator.
//!
//! One step advances
//!
//! ```text
//! dψ = −iHψ dt − (γ²/2)(L − ⟨L⟩)²ψ dt + γ(L − ⟨L⟩)ψ dW
//! ```
//!
//! with complex Wiener increments (E|dW|² = dt, E dW² = 0) and renormalizes.
//! The drift is evaluated at an explicit midpoint, the noise at the start
//! of the step.

use nalgebra::Matrix4;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::HomogeneousState;
use crate::observables::{
    concurrence, expectation_amplitudes, on_first, on_second, pauli_x, pauli_y, TwoQubitOperator,
};

pub type Amplitudes = [Complex64; 4];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LindbladSpec {
    pub l11: f64,
    pub l12: f64,
    pub l21: f64,
    pub l22: f64,
    pub gamma: f64,
}

impl LindbladSpec {
    /// l = (0.21, 0.21, 0.215, 0.205) with the given coupling.
    pub fn reference(gamma: f64) -> Self {
        LindbladSpec {
            l11: 0.21,
            l12: 0.21,
            l21: 0.215,
            l22: 0.205,
            gamma,
        }
    }

    pub fn diagonal(&self) -> [f64; 4] {
        [self.l11, self.l12, self.l21, self.l22]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.diagonal().iter().all(|l| l.is_finite()) {
            return Err(Error::InvalidInput(
                "Lindblad coefficients must be finite".into(),
            ));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "gamma must be finite and non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// L = diag(l11, l12, l21, l22).
pub fn lindblad_operator(spec: &LindbladSpec) -> TwoQubitOperator {
    let l = spec.diagonal();
    let m = Matrix4::from_fn(|i, j| {
        if i == j {
            Complex64::new(l[i], 0.0)
        } else {
            ZERO
        }
    });
    TwoQubitOperator::new(m).expect("a real diagonal matrix is Hermitian")
}

/// Complex Wiener increments for one run, keyed by (seed, run index).
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    seed: u64,
    run: u64,
    step: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, run: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run);
        NoiseStream {
            rng,
            seed,
            run,
            step: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn run(&self) -> u64 {
        self.run
    }

    /// Number of increments drawn so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// (g1 + i g2)·√(dt/2).
    pub fn increment(&mut self, dt: f64) -> Complex64 {
        let g1: f64 = StandardNormal.sample(&mut self.rng);
        let g2: f64 = StandardNormal.sample(&mut self.rng);
        self.step += 1;
        Complex64::new(g1, g2) * (0.5 * dt).sqrt()
    }
}

fn norm_sqr(c: &Amplitudes) -> f64 {
    c.iter().map(|a| a.norm_sqr()).sum()
}

pub fn normalize(c: &Amplitudes) -> Amplitudes {
    let n = norm_sqr(c).sqrt();
    c.map(|a| a / n)
}

/// (L − ⟨L⟩)ψ for diagonal L.
fn centred(l: &[f64; 4], c: &Amplitudes) -> Amplitudes {
    let mean = c
        .iter()
        .zip(l)
        .map(|(a, li)| li * a.norm_sqr())
        .sum::<f64>()
        / norm_sqr(c);
    let mut out = [ZERO; 4];
    for k in 0..4 {
        out[k] = c[k] * (l[k] - mean);
    }
    out
}

fn drift(h: &TwoQubitOperator, l: &[f64; 4], gamma: f64, c: &Amplitudes) -> Amplitudes {
    let hc = h.apply(c);
    let mean = c
        .iter()
        .zip(l)
        .map(|(a, li)| li * a.norm_sqr())
        .sum::<f64>()
        / norm_sqr(c);
    let mut out = [ZERO; 4];
    for k in 0..4 {
        let d = l[k] - mean;
        out[k] = -Complex64::i() * hc[k] - 0.5 * gamma * gamma * d * d * c[k];
    }
    out
}

/// One step from a normalized ψ; the result is normalized.
pub fn qsd_step(
    h: &TwoQubitOperator,
    l: &LindbladSpec,
    psi: &Amplitudes,
    dt: f64,
    dw: Complex64,
) -> Amplitudes {
    let ld = l.diagonal();
    let a0 = drift(h, &ld, l.gamma, psi);
    let mut mid = *psi;
    for k in 0..4 {
        mid[k] += 0.5 * dt * a0[k];
    }
    let a = drift(h, &ld, l.gamma, &mid);
    let b = centred(&ld, psi);
    let mut out = *psi;
    for k in 0..4 {
        out[k] += dt * a[k] + l.gamma * b[k] * dw;
    }
    normalize(&out)
}

/// True when the localization rate times dt is too large to trust the scheme.
/// The rate is γ² times the squared spread of the eigenvalues of L.
pub fn step_is_coarse(l: &LindbladSpec, dt: f64) -> bool {
    let d = l.diagonal();
    let spread = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - d.iter().cloned().fold(f64::INFINITY, f64::min);
    l.gamma * l.gamma * spread * spread * dt > 0.1
}

/// Observables recorded along a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QsdObservables {
    pub sigma_x1: f64,
    pub sigma_y2: f64,
    pub entanglement: f64,
}

impl QsdObservables {
    pub const NAMES: [&'static str; 3] = ["sigma_x1", "sigma_y2", "entanglement"];

    pub fn as_array(&self) -> [f64; 3] {
        [self.sigma_x1, self.sigma_y2, self.entanglement]
    }
}

struct ObservableOps {
    sx1: TwoQubitOperator,
    sy2: TwoQubitOperator,
}

impl ObservableOps {
    fn new() -> Self {
        ObservableOps {
            sx1: on_first(&pauli_x()),
            sy2: on_second(&pauli_y()),
        }
    }

    fn measure(&self, c: &Amplitudes) -> QsdObservables {
        QsdObservables {
            sigma_x1: expectation_amplitudes(&self.sx1, c),
            sigma_y2: expectation_amplitudes(&self.sy2, c),
            entanglement: concurrence(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QsdSample {
    pub t: f64,
    pub state: Amplitudes,
    pub observables: QsdObservables,
}

/// Fixed-step integration parameters shared by single runs and ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QsdSchedule {
    pub t_end: f64,
    pub dt: f64,
    /// Record every this many steps (the final step is always recorded).
    pub sample_every: usize,
}

impl QsdSchedule {
    pub fn new(t_end: f64, dt: f64, sample_every: usize) -> Self {
        QsdSchedule {
            t_end,
            dt,
            sample_every,
        }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "t_end must be non-negative, got {}",
                self.t_end
            )));
        }
        if self.sample_every == 0 {
            return Err(Error::InvalidInput(
                "sample_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn initial_amplitudes(psi0: &HomogeneousState) -> Result<Amplitudes> {
    if psi0.dim() != 4 {
        return Err(Error::InvalidInput(
            "QSD runs need a two-qubit state".into(),
        ));
    }
    let c = psi0.amplitudes();
    Ok(normalize(&[c[0], c[1], c[2], c[3]]))
}

/// One run driven by the stream (seed, run).
pub fn simulate_qsd_run(
    h: &TwoQubitOperator,
    l: &LindbladSpec,
    psi0: &HomogeneousState,
    schedule: &QsdSchedule,
    seed: u64,
    run: u64,
) -> Result<Vec<QsdSample>> {
    l.validate()?;
    schedule.validate()?;
    let ops = ObservableOps::new();
    let mut noise = NoiseStream::new(seed, run);
    let mut psi = initial_amplitudes(psi0)?;
    let n = schedule.steps();
    let mut out = Vec::with_capacity(n / schedule.sample_every + 2);
    out.push(QsdSample {
        t: 0.0,
        state: psi,
        observables: ops.measure(&psi),
    });
    for i in 1..=n {
        let dw = noise.increment(schedule.dt);
        psi = qsd_step(h, l, &psi, schedule.dt, dw);
        if i % schedule.sample_every == 0 || i == n {
            out.push(QsdSample {
                t: i as f64 * schedule.dt,
                state: psi,
                observables: ops.measure(&psi),
            });
        }
    }
    Ok(out)
}

/// Run 0 of the stream family `seed`.
pub fn simulate_qsd(
    h: &TwoQubitOperator,
    l: &LindbladSpec,
    psi0: &HomogeneousState,
    schedule: &QsdSchedule,
    seed: u64,
) -> Result<Vec<QsdSample>> {
    simulate_qsd_run(h, l, psi0, schedule, seed, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsemblePoint {
    pub t: f64,
    pub mean: [f64; 3],
    pub stderr: [f64; 3],
}

/// Per-sample mean and standard error over `n_runs` runs with streams
/// (base_seed, 0..n_runs). Runs execute in parallel; the reduction is
/// ordered by run index.
pub fn ensemble_expectations(
    h: &TwoQubitOperator,
    l: &LindbladSpec,
    psi0: &HomogeneousState,
    schedule: &QsdSchedule,
    n_runs: usize,
    base_seed: u64,
) -> Result<Vec<EnsemblePoint>> {
    if n_runs == 0 {
        return Err(Error::InvalidInput("n_runs must be at least 1".into()));
    }
    let runs: Vec<Vec<QsdSample>> = (0..n_runs as u64)
        .into_par_iter()
        .map(|run| simulate_qsd_run(h, l, psi0, schedule, base_seed, run))
        .collect::<Result<_>>()?;
    let n_samples = runs[0].len();
    let mut out = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        // shifted by the first run so that identical samples give exact results
        let v0 = runs[0][s].observables.as_array();
        let mut shift = [0.0; 3];
        for run in &runs {
            let v = run[s].observables.as_array();
            for k in 0..3 {
                shift[k] += v[k] - v0[k];
            }
        }
        shift.iter_mut().for_each(|m| *m /= n_runs as f64);
        let mut stderr = [0.0; 3];
        if n_runs > 1 {
            let mut var = [0.0; 3];
            for run in &runs {
                let v = run[s].observables.as_array();
                for k in 0..3 {
                    var[k] += (v[k] - v0[k] - shift[k]).powi(2);
                }
            }
            for k in 0..3 {
                stderr[k] = (var[k] / ((n_runs - 1) as f64 * n_runs as f64)).sqrt();
            }
        }
        let mean = [v0[0] + shift[0], v0[1] + shift[1], v0[2] + shift[2]];
        out.push(EnsemblePoint {
            t: runs[0][s].t,
            mean,
            stderr,
        });
    }
    Ok(out)
}

/// First time the entanglement of run (seed, run) drops below `threshold`,
/// or `None` within `t_max`.
#[allow(clippy::too_many_arguments)]
pub fn collapse_time(
    h: &TwoQubitOperator,
    l: &LindbladSpec,
    psi0: &HomogeneousState,
    dt: f64,
    t_max: f64,
    threshold: f64,
    seed: u64,
    run: u64,
) -> Result<Option<f64>> {
    l.validate()?;
    QsdSchedule::new(t_max, dt, 1).validate()?;
    let mut noise = NoiseStream::new(seed, run);
    let mut psi = initial_amplitudes(psi0)?;
    if concurrence(&psi) < threshold {
        return Ok(Some(0.0));
    }
    let n = (t_max / dt).round() as usize;
    for i in 1..=n {
        psi = qsd_step(h, l, &psi, dt, noise.increment(dt));
        if concurrence(&psi) < threshold {
            return Ok(Some(i as f64 * dt));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseStats {
    /// Collapse times ordered by run index; `None` for runs that never collapsed.
    pub times: Vec<Option<f64>>,
    /// Median over all runs, counting non-collapsed runs as +∞; `None` if
    /// fewer than half the runs collapsed.
    pub median: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn collapse_statistics(
    h: &TwoQubitOperator,
    l: &LindbladSpec,
    psi0: &HomogeneousState,
    dt: f64,
    t_max: f64,
    threshold: f64,
    n_runs: usize,
    base_seed: u64,
) -> Result<CollapseStats> {
    if n_runs == 0 {
        return Err(Error::InvalidInput("n_runs must be at least 1".into()));
    }
    let times: Vec<Option<f64>> = (0..n_runs as u64)
        .into_par_iter()
        .map(|run| collapse_time(h, l, psi0, dt, t_max, threshold, base_seed, run))
        .collect::<Result<_>>()?;
    let mut sorted: Vec<f64> = times.iter().map(|t| t.unwrap_or(f64::INFINITY)).collect();
    sorted.sort_by(f64::total_cmp);
    let m = if n_runs % 2 == 1 {
        sorted[n_runs / 2]
    } else {
        0.5 * (sorted[n_runs / 2 - 1] + sorted[n_runs / 2])
    };
    Ok(CollapseStats {
        times,
        median: m.is_finite().then_some(m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Propagator;
    use crate::observables::{build_hamiltonian, HamiltonianSpec};

    fn zero_h() -> TwoQubitOperator {
        TwoQubitOperator::new(Matrix4::zeros()).unwrap()
    }

    fn bell() -> HomogeneousState {
        HomogeneousState::from_real(&[1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn lindblad_operator_is_the_diagonal() {
        let l = lindblad_operator(&LindbladSpec::reference(5.0));
        let m = l.matrix();
        let d = [0.21, 0.21, 0.215, 0.205];
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { d[i] } else { 0.0 };
                assert_eq!(m[(i, j)], c(expected, 0.0));
            }
        }
        assert_eq!(*m, m.adjoint());
    }

    #[test]
    fn uniform_lindblad_is_unitary() {
        let l = LindbladSpec {
            l11: 0.3,
            l12: 0.3,
            l21: 0.3,
            l22: 0.3,
            gamma: 4.0,
        };
        let h = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let psi = normalize(&[c(0.5, 0.1), c(-0.3, 0.2), c(0.1, 0.7), c(0.2, -0.2)]);
        let free = LindbladSpec { gamma: 0.0, ..l };
        let a = qsd_step(&h, &l, &psi, 1e-3, c(0.9, -1.3));
        let b = qsd_step(&h, &free, &psi, 1e-3, ZERO);
        for k in 0..4 {
            assert!((a[k] - b[k]).norm() < 1e-15);
        }
    }

    #[test]
    fn output_is_normalized() {
        let h = build_hamiltonian(&HamiltonianSpec::symmetric(1.0, 1.7));
        let l = LindbladSpec::reference(5.0);
        let mut noise = NoiseStream::new(3, 0);
        let mut psi = normalize(&[c(0.5, 0.1), c(-0.3, 0.2), c(0.1, 0.7), c(0.2, -0.2)]);
        for _ in 0..1000 {
            psi = qsd_step(&h, &l, &psi, 0.01, noise.increment(0.01));
            assert!((norm_sqr(&psi) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn eigenstates_are_fixed_points() {
        let l = LindbladSpec::reference(5.0);
        let h = zero_h();
        let mut noise = NoiseStream::new(11, 2);
        let up_up = [c(1.0, 0.0), ZERO, ZERO, ZERO];
        let down_up = [ZERO, ZERO, c(0.0, 1.0), ZERO];
        let degenerate = normalize(&[c(0.6, 0.0), c(0.0, 0.8), ZERO, ZERO]);
        for psi in [up_up, down_up, degenerate] {
            let mut cur = psi;
            for _ in 0..100 {
                cur = qsd_step(&h, &l, &cur, 0.05, noise.increment(0.05));
            }
            for k in 0..4 {
                assert!((cur[k] - psi[k]).norm() <= 1e-15, "{psi:?} → {cur:?}");
            }
        }
        let mut cur = up_up;
        cur = qsd_step(&h, &l, &cur, 0.05, c(1.0, 1.0));
        assert_eq!(cur, up_up);
    }

    #[test]
    fn deterministic_limit_matches_unitary_evolution() {
        let h = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let l = LindbladSpec::reference(0.0);
        let psi0 = HomogeneousState::new(vec![c(0.5, 0.0), c(0.3, 0.2), c(0.0, -0.4), c(0.6, 0.0)])
            .unwrap();
        let schedule = QsdSchedule::new(5.0, 1e-4, 1000);
        let run = simulate_qsd(&h, &l, &psi0, &schedule, 1).unwrap();
        let prop = Propagator::new(&h);
        let c0 = initial_amplitudes(&psi0).unwrap();
        let mut worst: f64 = 0.0;
        for s in &run {
            let e = prop.evolve(&c0, s.t);
            for (a, b) in s.state.iter().zip(&e) {
                worst = worst.max((a - b).norm());
            }
        }
        assert_eq!(run.last().unwrap().t, 5.0);
        assert!(worst <= 1e-6, "{worst:e}");
    }

    #[test]
    fn runs_are_reproducible() {
        let h = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let l = LindbladSpec::reference(5.0);
        let schedule = QsdSchedule::new(2.0, 1e-3, 10);
        let a = simulate_qsd(&h, &l, &bell(), &schedule, 42).unwrap();
        let b = simulate_qsd(&h, &l, &bell(), &schedule, 42).unwrap();
        let other = simulate_qsd(&h, &l, &bell(), &schedule, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        assert_eq!(a.len(), 201);
    }

    #[test]
    fn noise_statistics() {
        let mut noise = NoiseStream::new(7, 0);
        let n = 200_000;
        let dt = 0.01;
        let (mut m, mut m2, mut mabs) = (ZERO, ZERO, 0.0);
        for _ in 0..n {
            let w = noise.increment(dt);
            m += w;
            m2 += w * w;
            mabs += w.norm_sqr();
        }
        let nf = n as f64;
        assert!((m / nf).norm() < 5.0 * (dt / nf).sqrt());
        assert!((m2 / nf).norm() < 5.0 * dt / nf.sqrt());
        assert!((mabs / nf - dt).abs() < 5.0 * dt / nf.sqrt());
        assert_eq!(noise.step(), n as u64);
        let mut a = NoiseStream::new(7, 1);
        let mut b = NoiseStream::new(7, 0);
        assert_ne!(a.increment(dt), b.increment(dt));
    }

    #[test]
    fn single_run_ensemble_has_zero_error() {
        let h = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let l = LindbladSpec::reference(5.0);
        let schedule = QsdSchedule::new(1.0, 1e-3, 100);
        let ens = ensemble_expectations(&h, &l, &bell(), &schedule, 1, 9).unwrap();
        let run = simulate_qsd(&h, &l, &bell(), &schedule, 9).unwrap();
        assert_eq!(ens.len(), run.len());
        for (e, r) in ens.iter().zip(&run) {
            assert_eq!(e.mean, r.observables.as_array());
            assert_eq!(e.stderr, [0.0; 3]);
        }
    }

    #[test]
    fn ensemble_without_noise_has_zero_variance() {
        let h = build_hamiltonian(&HamiltonianSpec::nonsymmetric(1.0, 1.7));
        let l = LindbladSpec::reference(0.0);
        let schedule = QsdSchedule::new(1.0, 1e-3, 100);
        let ens = ensemble_expectations(&h, &l, &bell(), &schedule, 8, 9).unwrap();
        for e in &ens {
            assert_eq!(e.stderr, [0.0; 3]);
        }
    }

    #[test]
    fn collapse_from_bell_state() {
        let l = LindbladSpec::reference(10.0);
        let t = collapse_time(&zero_h(), &l, &bell(), 0.01, 1e5, 0.05, 5, 0).unwrap();
        assert!(t.is_some_and(|t| t > 0.0));
        let product = HomogeneousState::from_real(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            collapse_time(&zero_h(), &l, &product, 0.01, 1.0, 0.05, 5, 0).unwrap(),
            Some(0.0)
        );
    }

    #[test]
    fn invalid_inputs() {
        let h = zero_h();
        let l = LindbladSpec::reference(-1.0);
        assert!(simulate_qsd(&h, &l, &bell(), &QsdSchedule::new(1.0, 0.1, 1), 0).is_err());
        let l = LindbladSpec::reference(1.0);
        assert!(simulate_qsd(&h, &l, &bell(), &QsdSchedule::new(1.0, 0.0, 1), 0).is_err());
        assert!(simulate_qsd(&h, &l, &bell(), &QsdSchedule::new(1.0, 0.1, 0), 0).is_err());
        assert!(
            ensemble_expectations(&h, &l, &bell(), &QsdSchedule::new(1.0, 0.1, 1), 0, 0).is_err()
        );
    }

    #[test]
    fn coarse_step_uses_eigenvalue_spread() {
        assert!(!step_is_coarse(&LindbladSpec::reference(10.0), 0.05));
        let wide = LindbladSpec {
            l11: 1.0,
            l12: 0.0,
            l21: 0.0,
            l22: -1.0,
            gamma: 1.0,
        };
        assert!(step_is_coarse(&wide, 0.05));
        assert!(!step_is_coarse(&wide, 0.01));
    }
}
