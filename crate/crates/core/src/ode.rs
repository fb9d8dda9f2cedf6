//! Explicit Runge–Kutta integrators.
//!
//! [`DormandPrince`] is the embedded 5(4) pair with FSAL and the
//! fourth-order continuous extension; the caller drives it one accepted
//! step at a time so that chart switches, section crossings and tangent
//! renormalizations can be handled between steps. [`rk4_step`] is the
//! classical fixed-step scheme for bit-reproducible runs.

use crate::error::{Error, Result};

/// A first-order system y′ = f(t, y).
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Step-size controller settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Tolerances {
            rtol: tol,
            atol: tol,
        }
    }
}

/// Polynomial interpolant over one accepted step.
#[derive(Debug, Clone)]
pub struct DenseStep {
    pub t0: f64,
    pub t1: f64,
    cont: [Vec<f64>; 5],
}

impl DenseStep {
    pub fn y0(&self) -> &[f64] {
        &self.cont[0]
    }

    pub fn y1(&self) -> Vec<f64> {
        self.cont[0]
            .iter()
            .zip(&self.cont[1])
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        let h = self.t1 - self.t0;
        let theta = (t - self.t0) / h;
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &self.cont;
        for i in 0..out.len() {
            out[i] = r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
        }
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.cont[0].len()];
        self.interpolate(t, &mut out);
        out
    }
}

/// Adaptive Dormand–Prince 5(4) stepper holding the current state.
#[derive(Debug, Clone)]
pub struct DormandPrince {
    tol: Tolerances,
    /// Smallest admissible step relative to max(1, |t|).
    pub h_min_rel: f64,
    pub h_max: f64,
    t: f64,
    y: Vec<f64>,
    k1: Vec<f64>,
    h: f64,
    accepted: usize,
    rejected: usize,
}

impl DormandPrince {
    pub fn new<S: OdeSystem + ?Sized>(
        sys: &S,
        t0: f64,
        y0: &[f64],
        tol: Tolerances,
    ) -> Result<Self> {
        if !(tol.rtol > 0.0 && tol.atol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        let mut dp = DormandPrince {
            tol,
            h_min_rel: 1e-14,
            h_max: f64::INFINITY,
            t: t0,
            y: y0.to_vec(),
            k1: vec![0.0; y0.len()],
            h: 0.0,
            accepted: 0,
            rejected: 0,
        };
        sys.rhs(t0, y0, &mut dp.k1)?;
        dp.h = dp.initial_step(sys)?;
        Ok(dp)
    }

    pub fn with_max_step(mut self, h_max: f64) -> Self {
        self.h_max = h_max;
        self.h = self.h.min(h_max);
        self
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn accepted_steps(&self) -> usize {
        self.accepted
    }

    pub fn rejected_steps(&self) -> usize {
        self.rejected
    }

    /// Replace the state (e.g. after a chart change), keeping the step size.
    pub fn reset<S: OdeSystem + ?Sized>(&mut self, sys: &S, t: f64, y: &[f64]) -> Result<()> {
        self.t = t;
        self.y.clear();
        self.y.extend_from_slice(y);
        self.k1.resize(y.len(), 0.0);
        sys.rhs(t, y, &mut self.k1)
    }

    fn scale(&self, a: f64, b: f64) -> f64 {
        self.tol.atol + self.tol.rtol * a.abs().max(b.abs())
    }

    fn initial_step<S: OdeSystem + ?Sized>(&self, sys: &S) -> Result<f64> {
        let n = self.y.len() as f64;
        let rms = |v: &[f64], w: &[f64]| -> f64 {
            (v.iter()
                .zip(w)
                .map(|(a, y)| (a / self.scale(*y, *y)).powi(2))
                .sum::<f64>()
                / n)
                .sqrt()
        };
        let d0 = rms(&self.y, &self.y);
        let d1 = rms(&self.k1, &self.y);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        h0 = h0.min(self.h_max);
        let y1: Vec<f64> = self
            .y
            .iter()
            .zip(&self.k1)
            .map(|(y, k)| y + h0 * k)
            .collect();
        let mut f1 = vec![0.0; self.y.len()];
        sys.rhs(self.t + h0, &y1, &mut f1)?;
        let diff: Vec<f64> = f1.iter().zip(&self.k1).map(|(a, b)| a - b).collect();
        let d2 = rms(&diff, &self.y) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(self.h_max))
    }

    /// Take one accepted step that does not pass `t_limit` (which must lie
    /// ahead of the current time).
    pub fn step<S: OdeSystem + ?Sized>(&mut self, sys: &S, t_limit: f64) -> Result<DenseStep> {
        let n = self.y.len();
        let mut k = vec![vec![0.0; n]; 6];
        let mut ytmp = vec![0.0; n];
        let mut y1 = vec![0.0; n];
        let mut k7 = vec![0.0; n];
        let mut facmax = 10.0;
        loop {
            let remaining = t_limit - self.t;
            let mut h = self.h.min(self.h_max);
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            let h_min = self.h_min_rel * self.t.abs().max(1.0);
            if h < h_min && !last {
                return Err(Error::StepFailure {
                    t: self.t,
                    h,
                    last_state: self.y.clone(),
                });
            }
            let (t, y, k1) = (self.t, &self.y, &self.k1);

            for i in 0..n {
                ytmp[i] = y[i] + h * A21 * k1[i];
            }
            sys.rhs(t + C2 * h, &ytmp, &mut k[1])?;
            for i in 0..n {
                ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k[1][i]);
            }
            sys.rhs(t + C3 * h, &ytmp, &mut k[2])?;
            for i in 0..n {
                ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k[1][i] + A43 * k[2][i]);
            }
            sys.rhs(t + C4 * h, &ytmp, &mut k[3])?;
            for i in 0..n {
                ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
            }
            sys.rhs(t + C5 * h, &ytmp, &mut k[4])?;
            for i in 0..n {
                ytmp[i] = y[i]
                    + h * (A61 * k1[i]
                        + A62 * k[1][i]
                        + A63 * k[2][i]
                        + A64 * k[3][i]
                        + A65 * k[4][i]);
            }
            sys.rhs(t + h, &ytmp, &mut k[5])?;
            for i in 0..n {
                y1[i] = y[i]
                    + h * (A71 * k1[i]
                        + A73 * k[2][i]
                        + A74 * k[3][i]
                        + A75 * k[4][i]
                        + A76 * k[5][i]);
            }
            sys.rhs(t + h, &y1, &mut k7)?;

            let mut err = 0.0;
            for i in 0..n {
                let e = h
                    * (E1 * k1[i]
                        + E3 * k[2][i]
                        + E4 * k[3][i]
                        + E5 * k[4][i]
                        + E6 * k[5][i]
                        + E7 * k7[i]);
                err += (e / self.scale(y[i], y1[i])).powi(2);
            }
            let err = (err / n as f64).sqrt();
            if !err.is_finite() {
                self.rejected += 1;
                self.h = h * 0.2;
                facmax = 1.0;
                continue;
            }

            let fac = (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, facmax);
            if err <= 1.0 {
                let mut cont: [Vec<f64>; 5] = Default::default();
                let ydiff: Vec<f64> = y1.iter().zip(y).map(|(a, b)| a - b).collect();
                let bspl: Vec<f64> = (0..n).map(|i| h * k1[i] - ydiff[i]).collect();
                cont[3] = (0..n).map(|i| ydiff[i] - h * k7[i] - bspl[i]).collect();
                cont[4] = (0..n)
                    .map(|i| {
                        h * (D1 * k1[i]
                            + D3 * k[2][i]
                            + D4 * k[3][i]
                            + D5 * k[4][i]
                            + D6 * k[5][i]
                            + D7 * k7[i])
                    })
                    .collect();
                cont[0] = y.clone();
                cont[1] = ydiff;
                cont[2] = bspl;

                let t_new = if last { t_limit } else { t + h };
                let dense = DenseStep {
                    t0: t,
                    t1: t_new,
                    cont,
                };
                self.t = t_new;
                std::mem::swap(&mut self.y, &mut y1);
                std::mem::swap(&mut self.k1, &mut k7);
                self.accepted += 1;
                // A step truncated at t_limit says nothing about the natural step size.
                if !last || fac < 1.0 {
                    self.h = h * fac;
                }
                return Ok(dense);
            }
            self.rejected += 1;
            self.h = h * fac.min(1.0);
            facmax = 1.0;
        }
    }

    /// Integrate to `t_end`, calling `observe` after every accepted step.
    pub fn advance_to<S, F>(&mut self, sys: &S, t_end: f64, mut observe: F) -> Result<()>
    where
        S: OdeSystem + ?Sized,
        F: FnMut(&DenseStep),
    {
        while self.t < t_end {
            let step = self.step(sys, t_end)?;
            observe(&step);
        }
        Ok(())
    }
}

/// One classical RK4 step.
pub fn rk4_step<S: OdeSystem + ?Sized>(sys: &S, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    sys.rhs(t, y, &mut k1)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    sys.rhs(t + 0.5 * h, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    sys.rhs(t + 0.5 * h, &tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    sys.rhs(t + h, &tmp, &mut k4)?;
    Ok((0..n)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrate with a fixed step of at most `h` to `t_end` and return y(t_end).
pub fn integrate_rk4<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    h: f64,
) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(Error::InvalidInput("step must be positive".into()));
    }
    let steps = ((t_end - t0) / h).ceil().max(0.0) as usize;
    let mut y = y0.to_vec();
    if steps == 0 {
        return Ok(y);
    }
    let dt = (t_end - t0) / steps as f64;
    for i in 0..steps {
        y = rk4_step(sys, t0 + i as f64 * dt, &y, dt)?;
    }
    Ok(y)
}
