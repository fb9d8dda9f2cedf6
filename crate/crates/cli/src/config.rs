//! Versioned TOML experiment configuration.

use std::path::{Path, PathBuf};

use sepflow::chaos::SeedBox;
use sepflow::constraints::FieldModel;
use sepflow::observables::HamiltonianSpec;
use sepflow::qsd::LindbladSpec;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Flow,
    Constrained,
    Poincare,
    Lyapunov,
    Qsd,
    Verify,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Flow => "flow",
            Kind::Constrained => "constrained",
            Kind::Poincare => "poincare",
            Kind::Lyapunov => "lyapunov",
            Kind::Qsd => "qsd",
            Kind::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: Kind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub hamiltonian: HamiltonianConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub constrained: ConstrainedConfig,
    #[serde(default)]
    pub poincare: PoincareConfig,
    #[serde(default)]
    pub lyapunov: LyapunovConfig,
    #[serde(default)]
    pub qsd: QsdConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_seed() -> u64 {
    2024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
        }
    }
}

/// Couplings of ω(σz⊗1 + 1⊗σz) + μx σx⊗σx + μy σy⊗σy + μz σz⊗σz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    pub omega: f64,
    #[serde(default)]
    pub mu_x: f64,
    #[serde(default)]
    pub mu_y: f64,
    #[serde(default)]
    pub mu_z: f64,
}

impl Default for HamiltonianConfig {
    fn default() -> Self {
        HamiltonianConfig {
            omega: 1.0,
            mu_x: 1.7,
            mu_y: 0.0,
            mu_z: 0.0,
        }
    }
}

impl HamiltonianConfig {
    pub fn spec(&self) -> HamiltonianSpec {
        HamiltonianSpec {
            omega: self.omega,
            mu_x: self.mu_x,
            mu_y: self.mu_y,
            mu_z: self.mu_z,
        }
    }

    /// The spec with its couplings rescaled so the largest one has size `mu`.
    pub fn with_coupling(&self, mu: f64) -> HamiltonianSpec {
        let s = self.spec();
        let m = s.mu_x.abs().max(s.mu_y.abs()).max(s.mu_z.abs());
        let k = mu / m;
        HamiltonianSpec {
            omega: s.omega,
            mu_x: s.mu_x * k,
            mu_y: s.mu_y * k,
            mu_z: s.mu_z * k,
        }
    }

    pub fn coupling(&self) -> f64 {
        self.mu_x.abs().max(self.mu_y.abs()).max(self.mu_z.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMethod {
    Adaptive,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub t_end: f64,
    pub method: FlowMethod,
    /// Local error tolerance of the adaptive scheme.
    pub tol: f64,
    /// Step of the fixed RK4 scheme.
    pub step: f64,
    pub sample_interval: f64,
    pub chart: usize,
    /// Initial (q1, q2, q3); drawn from the seed in [-1, 1] when absent.
    pub q: Option<[f64; 3]>,
    pub p: Option<[f64; 3]>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            t_end: 100.0,
            method: FlowMethod::Adaptive,
            tol: 1e-12,
            step: 1e-3,
            sample_interval: 0.1,
            chart: 1,
            q: None,
            p: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstrainedConfig {
    pub t_end: f64,
    pub tol: f64,
    pub sample_interval: f64,
    pub model: FieldModel,
    /// Initial (q1, q2, p1, p2); a seeded point on the shell `h` when absent.
    pub r: Option<[f64; 4]>,
    pub h: f64,
    pub seed_index: u64,
    pub seed_box: SeedBox,
}

impl Default for ConstrainedConfig {
    fn default() -> Self {
        ConstrainedConfig {
            t_end: 100.0,
            tol: 1e-12,
            sample_interval: 0.1,
            model: FieldModel::Pipeline,
            r: None,
            h: 1.5,
            seed_index: 0,
            seed_box: SeedBox::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoincareConfig {
    pub h: f64,
    pub n_seeds: usize,
    pub n_crossings: usize,
    /// Coupling sweep; the configured Hamiltonian alone when empty.
    pub mu_values: Vec<f64>,
    pub tol: f64,
    pub t_max: f64,
    pub model: FieldModel,
    pub seed_box: SeedBox,
}

impl Default for PoincareConfig {
    fn default() -> Self {
        PoincareConfig {
            h: 1.5,
            n_seeds: 10,
            n_crossings: 500,
            mu_values: Vec::new(),
            tol: 1e-11,
            t_max: 1e5,
            model: FieldModel::Closed,
            seed_box: SeedBox::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LyapunovConfig {
    pub h: f64,
    pub n_seeds: usize,
    pub t_total: f64,
    pub renorm_interval: f64,
    pub tol: f64,
    pub blocks: usize,
    pub mu_values: Vec<f64>,
    /// Chaos threshold; ten times the symmetric baseline when absent.
    pub threshold: Option<f64>,
    /// Write running estimates per seed.
    pub history: bool,
    pub seed_box: SeedBox,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        LyapunovConfig {
            h: 1.5,
            n_seeds: 10,
            t_total: 1000.0,
            renorm_interval: 1.0,
            tol: 1e-9,
            blocks: 20,
            mu_values: Vec::new(),
            threshold: None,
            history: true,
            seed_box: SeedBox::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QsdConfig {
    pub gamma: f64,
    /// Diagonal of L: (l11, l12, l21, l22).
    pub l: [f64; 4],
    pub dt: f64,
    pub t_end: f64,
    pub sample_every: usize,
    pub n_runs: usize,
    /// Initial amplitudes, normalized before use. The default is a Bell-like
    /// state tilted off the even-parity subspace, where both plotted spin
    /// components would vanish identically.
    pub re: [f64; 4],
    pub im: [f64; 4],
    pub per_run: bool,
    /// Record first times the entanglement drops below this.
    pub collapse_threshold: Option<f64>,
}

impl Default for QsdConfig {
    fn default() -> Self {
        let l = LindbladSpec::reference(5.0);
        QsdConfig {
            gamma: l.gamma,
            l: l.diagonal(),
            dt: 0.01,
            t_end: 20.0,
            sample_every: 10,
            n_runs: 64,
            re: [0.7, 0.2, 0.1, 0.65],
            im: [0.0, 0.1, -0.05, 0.0],
            per_run: false,
            collapse_threshold: None,
        }
    }
}

impl QsdConfig {
    pub fn lindblad(&self) -> LindbladSpec {
        LindbladSpec {
            l11: self.l[0],
            l12: self.l[1],
            l21: self.l[2],
            l22: self.l[3],
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Criterion ids; all when empty.
    pub criteria: Vec<usize>,
    pub inject_constraint_bug: bool,
}

impl ExperimentConfig {
    pub fn default_for(kind: Kind) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            kind,
            seed: default_seed(),
            output: OutputConfig::default(),
            hamiltonian: HamiltonianConfig::default(),
            flow: FlowConfig::default(),
            constrained: ConstrainedConfig::default(),
            poincare: PoincareConfig::default(),
            lyapunov: LyapunovConfig::default(),
            qsd: QsdConfig::default(),
            verify: VerifyConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// The configuration as JSON, keeping only the sections this kind reads.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is a table");
        for kind in [
            "flow",
            "constrained",
            "poincare",
            "lyapunov",
            "qsd",
            "verify",
        ] {
            if kind != self.kind.name() {
                obj.remove(kind);
            }
        }
        if self.kind == Kind::Verify {
            obj.remove("hamiltonian");
        }
        v
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the fields the selected kind reads; the message names the field.
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        let h = &self.hamiltonian;
        for (name, v) in [
            ("omega", h.omega),
            ("mu_x", h.mu_x),
            ("mu_y", h.mu_y),
            ("mu_z", h.mu_z),
        ] {
            finite(&format!("hamiltonian.{name}"), v)?;
        }
        match self.kind {
            Kind::Flow => {
                let c = &self.flow;
                positive("flow.t_end", c.t_end)?;
                positive("flow.sample_interval", c.sample_interval)?;
                match c.method {
                    FlowMethod::Adaptive => positive("flow.tol", c.tol)?,
                    FlowMethod::Rk4 => positive("flow.step", c.step)?,
                }
                if !(1..=4).contains(&c.chart) {
                    return Err(format!("flow.chart: must be 1..=4, got {}", c.chart));
                }
                for (name, v) in [("flow.q", c.q), ("flow.p", c.p)] {
                    if let Some(a) = v {
                        a.iter().try_for_each(|x| finite(name, *x))?;
                    }
                }
            }
            Kind::Constrained => {
                let c = &self.constrained;
                positive("constrained.t_end", c.t_end)?;
                positive("constrained.tol", c.tol)?;
                positive("constrained.sample_interval", c.sample_interval)?;
                finite("constrained.h", c.h)?;
                if let Some(r) = c.r {
                    r.iter().try_for_each(|x| finite("constrained.r", *x))?;
                }
                seed_box("constrained.seed_box", &c.seed_box)?;
            }
            Kind::Poincare => {
                let c = &self.poincare;
                finite("poincare.h", c.h)?;
                at_least_one("poincare.n_seeds", c.n_seeds)?;
                at_least_one("poincare.n_crossings", c.n_crossings)?;
                positive("poincare.tol", c.tol)?;
                positive("poincare.t_max", c.t_max)?;
                sweep("poincare.mu_values", &c.mu_values, h)?;
                seed_box("poincare.seed_box", &c.seed_box)?;
            }
            Kind::Lyapunov => {
                let c = &self.lyapunov;
                finite("lyapunov.h", c.h)?;
                at_least_one("lyapunov.n_seeds", c.n_seeds)?;
                positive("lyapunov.t_total", c.t_total)?;
                positive("lyapunov.renorm_interval", c.renorm_interval)?;
                if c.renorm_interval > c.t_total {
                    return Err("lyapunov.renorm_interval: exceeds t_total".into());
                }
                positive("lyapunov.tol", c.tol)?;
                at_least_one("lyapunov.blocks", c.blocks)?;
                sweep("lyapunov.mu_values", &c.mu_values, h)?;
                if let Some(t) = c.threshold {
                    finite("lyapunov.threshold", t)?;
                }
                seed_box("lyapunov.seed_box", &c.seed_box)?;
            }
            Kind::Qsd => {
                let c = &self.qsd;
                if !(c.gamma >= 0.0 && c.gamma.is_finite()) {
                    return Err(format!(
                        "qsd.gamma: must be finite and non-negative, got {}",
                        c.gamma
                    ));
                }
                c.l.iter().try_for_each(|x| finite("qsd.l", *x))?;
                positive("qsd.dt", c.dt)?;
                positive("qsd.t_end", c.t_end)?;
                at_least_one("qsd.sample_every", c.sample_every)?;
                at_least_one("qsd.n_runs", c.n_runs)?;
                c.re.iter()
                    .chain(&c.im)
                    .try_for_each(|x| finite("qsd.re/im", *x))?;
                if c.re.iter().chain(&c.im).all(|x| *x == 0.0) {
                    return Err("qsd.re/im: initial state is zero".into());
                }
                if let Some(t) = c.collapse_threshold {
                    positive("qsd.collapse_threshold", t)?;
                }
            }
            Kind::Verify => {
                let known = sepflow::verify::CRITERIA.map(|(id, _)| id);
                if let Some(id) = self.verify.criteria.iter().find(|id| !known.contains(id)) {
                    return Err(format!("verify.criteria: no criterion {id}"));
                }
            }
        }
        Ok(())
    }
}

fn finite(name: &str, v: f64) -> Result<(), String> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name}: must be finite, got {v}"))
    }
}

fn positive(name: &str, v: f64) -> Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name}: must be positive and finite, got {v}"))
    }
}

fn at_least_one(name: &str, v: usize) -> Result<(), String> {
    if v >= 1 {
        Ok(())
    } else {
        Err(format!("{name}: must be at least 1"))
    }
}

fn sweep(name: &str, values: &[f64], h: &HamiltonianConfig) -> Result<(), String> {
    values.iter().try_for_each(|v| finite(name, *v))?;
    if !values.is_empty() && h.coupling() == 0.0 {
        return Err(format!(
            "{name}: a sweep needs a nonzero coupling in [hamiltonian]"
        ));
    }
    Ok(())
}

fn seed_box(name: &str, b: &SeedBox) -> Result<(), String> {
    for (axis, (lo, hi)) in [("q1", b.q1), ("p1", b.p1)] {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(format!(
                "{name}.{axis}: need finite lo < hi, got ({lo}, {hi})"
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for kind in [
            Kind::Flow,
            Kind::Constrained,
            Kind::Poincare,
            Kind::Lyapunov,
            Kind::Qsd,
            Kind::Verify,
        ] {
            let c = ExperimentConfig::default_for(kind);
            c.validate().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_toml("schema_version = 1\nkind = \"qsd\"\n").unwrap();
        assert_eq!(c, ExperimentConfig::default_for(Kind::Qsd));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ExperimentConfig::from_toml(
            "schema_version = 1\nkind = \"flow\"\n[flow]\nt_edn = 3.0\n",
        )
        .unwrap_err();
        assert!(err.contains("t_edn"), "{err}");
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = ExperimentConfig::default_for(Kind::Flow);
        c.flow.t_end = -1.0;
        assert!(c.validate().unwrap_err().starts_with("flow.t_end"));
        let mut c = ExperimentConfig::default_for(Kind::Flow);
        c.schema_version = 2;
        assert!(c.validate().unwrap_err().starts_with("schema_version"));
        let mut c = ExperimentConfig::default_for(Kind::Lyapunov);
        c.hamiltonian = HamiltonianConfig {
            omega: 1.0,
            mu_x: 0.0,
            mu_y: 0.0,
            mu_z: 0.0,
        };
        c.lyapunov.mu_values = vec![1.3];
        assert!(c.validate().unwrap_err().starts_with("lyapunov.mu_values"));
    }

    #[test]
    fn coupling_sweep_rescales() {
        let h = HamiltonianConfig {
            omega: 1.0,
            mu_x: 1.7,
            mu_y: 0.0,
            mu_z: 0.0,
        };
        assert_eq!(
            h.with_coupling(1.3),
            HamiltonianSpec::nonsymmetric(1.0, 1.3)
        );
        let h = HamiltonianConfig {
            omega: 1.0,
            mu_x: 0.0,
            mu_y: 0.0,
            mu_z: -2.0,
        };
        assert_eq!(h.with_coupling(1.0), HamiltonianSpec::symmetric(1.0, -1.0));
    }

    #[test]
    fn shipped_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let c = ExperimentConfig::load(&path).unwrap();
                c.validate()
                    .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                n += 1;
            }
        }
        assert!(n >= 6);
    }
}
