use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The chart amplitude is too small for the requested chart; the caller
    /// has to move to another chart.
    #[error("chart {chart} is singular for this state (relative |c^{chart}| = {modulus:.3e})")]
    ChartSingular { chart: usize, modulus: f64 },

    /// The symplectic form cannot be inverted reliably at this point.
    #[error("symplectic form is numerically singular (condition estimate {condition:.3e})")]
    SingularForm { condition: f64 },

    /// The adaptive integrator could not make progress.
    #[error("step size underflow at t = {t} (h = {h:.3e})")]
    StepFailure {
        t: f64,
        h: f64,
        /// Last accepted state.
        last_state: Vec<f64>,
    },

    /// The matrix of constraint brackets {f_i, f_j} is (numerically) singular.
    #[error("constraint bracket matrix is degenerate ({{f1, f2}} = {value:.3e})")]
    DegenerateBrackets { value: f64 },

    /// No admissible point exists on the requested energy shell.
    #[error("no admissible p2 > 0 on the energy shell h = {h}")]
    ShellEmpty { h: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
