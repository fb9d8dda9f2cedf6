//! One runner per experiment kind. Each writes its tables into the output
//! directory and returns the summary that goes into the manifest.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sepflow::chaos::{
    indexed_seed, lyapunov_max, poincare_section, symmetric_baseline, LyapunovEstimate,
    LyapunovOptions, ScanOptions, SectionOptions, SectionPoint,
};
use sepflow::constraints::{integrate_constrained_with, ReducedPoint};
use sepflow::flow::{integrate_flow_with, FlowOptions, Method};
use sepflow::geometry::{Chart, HomogeneousState, RealPhasePoint};
use sepflow::observables::{build_hamiltonian, HamiltonianSpec};
use sepflow::qsd::{
    collapse_statistics, ensemble_expectations, simulate_qsd_run, step_is_coarse, QsdObservables,
    QsdSample, QsdSchedule,
};
use sepflow::verify::{run_criterion, VerifyOptions, VerifyReport, CRITERIA};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, FlowMethod, HamiltonianConfig, Kind};
use crate::output::{num, Table};

/// Why a run stopped.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration; exit status 1.
    Validation(String),
    /// Numerical or I/O failure during the run; exit status 2.
    Numerical(String),
}

impl From<sepflow::Error> for Failure {
    fn from(e: sepflow::Error) -> Self {
        match e {
            sepflow::Error::InvalidInput(_) | sepflow::Error::ShellEmpty { .. } => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Numerical(format!("{e:#}"))
    }
}

pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub summary: Value,
    /// Present when the verification suite failed.
    pub failed: Option<usize>,
}

impl Outcome {
    fn new(outputs: Vec<PathBuf>, summary: Value) -> Self {
        Outcome {
            outputs,
            warnings: Vec::new(),
            summary,
            failed: None,
        }
    }
}

pub fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, Failure> {
    match cfg.kind {
        Kind::Flow => flow(cfg, dir),
        Kind::Constrained => constrained(cfg, dir),
        Kind::Poincare => poincare(cfg, dir),
        Kind::Lyapunov => lyapunov(cfg, dir),
        Kind::Qsd => qsd(cfg, dir),
        Kind::Verify => verify(cfg, dir),
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn flow(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, Failure> {
    let c = &cfg.flow;
    let spec = cfg.hamiltonian.spec();
    spec.validate()?;
    let op = build_hamiltonian(&spec);
    let mut rng = seeded(cfg.seed, 0);
    let mut draw = || -> [f64; 3] { std::array::from_fn(|_| rng.random_range(-1.0..1.0)) };
    let q = c.q.unwrap_or_else(&mut draw);
    let p = c.p.unwrap_or_else(&mut draw);
    let x0 = RealPhasePoint::new(q.to_vec(), p.to_vec());
    let method = match c.method {
        FlowMethod::Adaptive => Method::Adaptive { tol: c.tol },
        FlowMethod::Rk4 => Method::FixedRk4 { step: c.step },
    };
    let opts = FlowOptions {
        method,
        sample_interval: Some(c.sample_interval),
    };
    let traj = integrate_flow_with(&op, &x0, Chart::new(c.chart), c.t_end, &opts)?;

    let mut table = Table::create(
        dir.join("trajectory.csv"),
        &["t", "q1", "q2", "q3", "p1", "p2", "p3", "chart", "energy"],
    )?;
    for s in &traj.samples {
        let mut row = vec![num(s.t)];
        row.extend(s.x.q.iter().chain(&s.x.p).map(|v| num(*v)));
        row.push(s.chart.label().to_string());
        row.push(num(s.energy));
        table.row(row)?;
    }
    let path = table.finish()?;
    Ok(Outcome::new(
        vec![path],
        json!({
            "initial_q": q,
            "initial_p": p,
            "samples": traj.samples.len(),
            "chart_switches": traj.chart_switches,
            "initial_energy": traj.samples[0].energy,
            "max_energy_drift": traj.max_energy_drift(),
            "final_chart": traj.last().chart.label(),
        }),
    ))
}

fn constrained(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, Failure> {
    let c = &cfg.constrained;
    let spec = cfg.hamiltonian.spec();
    spec.validate()?;
    let r0 = match c.r {
        Some(r) => ReducedPoint::from_slice(&r),
        None => indexed_seed(&spec, c.h, cfg.seed, c.seed_index, &c.seed_box)?,
    };
    let traj =
        integrate_constrained_with(&spec, &r0, c.t_end, c.tol, c.model, Some(c.sample_interval))?;
    let mut table = Table::create(
        dir.join("constrained.csv"),
        &["t", "q1", "q2", "p1", "p2", "f1", "f2", "energy"],
    )?;
    for s in &traj.samples {
        table.row([s.t, s.r.q1, s.r.q2, s.r.p1, s.r.p2, s.f1, s.f2, s.energy].map(num))?;
    }
    let path = table.finish()?;
    Ok(Outcome::new(
        vec![path],
        json!({
            "initial_r": r0.to_array(),
            "samples": traj.samples.len(),
            "initial_energy": traj.samples[0].energy,
            "max_energy_drift": traj.max_energy_drift(),
            "max_constraint_violation": traj.max_constraint_violation(),
        }),
    ))
}

/// The Hamiltonians of a sweep, labelled by coupling size.
fn sweep(h: &HamiltonianConfig, values: &[f64]) -> Vec<(f64, HamiltonianSpec)> {
    if values.is_empty() {
        vec![(h.coupling(), h.spec())]
    } else {
        values.iter().map(|&mu| (mu, h.with_coupling(mu))).collect()
    }
}

fn poincare(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, Failure> {
    let c = &cfg.poincare;
    let specs = sweep(&cfg.hamiltonian, &c.mu_values);
    for (_, s) in &specs {
        s.validate()?;
    }
    let opts = SectionOptions {
        tol: c.tol,
        t_max: c.t_max,
        model: c.model,
    };
    let jobs: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|m| (0..c.n_seeds as u64).map(move |i| (m, i)))
        .collect();
    let sections: Vec<Vec<SectionPoint>> = jobs
        .par_iter()
        .map(|&(m, i)| {
            let spec = &specs[m].1;
            let r0 = indexed_seed(spec, c.h, cfg.seed, i, &c.seed_box)?;
            poincare_section(spec, &r0, c.n_crossings, &opts)
        })
        .collect::<sepflow::Result<_>>()?;

    let mut table = Table::create(
        dir.join("section.csv"),
        &["mu", "seed", "index", "t", "q1", "p1", "energy"],
    )?;
    let mut drift: f64 = 0.0;
    let mut short = Vec::new();
    for (&(m, i), pts) in jobs.iter().zip(&sections) {
        if pts.len() < c.n_crossings {
            short.push(format!(
                "mu {} seed {i}: {} of {} crossings",
                specs[m].0,
                pts.len(),
                c.n_crossings
            ));
        }
        for p in pts {
            drift = drift.max((p.energy - c.h).abs());
            table.row([
                num(specs[m].0),
                i.to_string(),
                p.index.to_string(),
                num(p.t),
                num(p.q1),
                num(p.p1),
                num(p.energy),
            ])?;
        }
    }
    let path = table.finish()?;
    let mut out = Outcome::new(
        vec![path],
        json!({
            "mu_values": specs.iter().map(|s| s.0).collect::<Vec<_>>(),
            "seeds_per_mu": c.n_seeds,
            "crossings": sections.iter().map(Vec::len).sum::<usize>(),
            "max_energy_deviation": drift,
        }),
    );
    out.warnings = short;
    Ok(out)
}

fn lyapunov(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, Failure> {
    let c = &cfg.lyapunov;
    let specs = sweep(&cfg.hamiltonian, &c.mu_values);
    for (_, s) in &specs {
        s.validate()?;
    }
    let scan = ScanOptions {
        h: c.h,
        n_seeds: c.n_seeds,
        base_seed: cfg.seed,
        seed_box: c.seed_box,
        lyapunov: LyapunovOptions {
            t_total: c.t_total,
            renorm_interval: c.renorm_interval,
            tol: c.tol,
            blocks: c.blocks,
        },
    };

    let mut scan_table = Table::create(
        dir.join("scan.csv"),
        &[
            "mu", "seed", "q1", "q2", "p1", "p2", "estimate", "stderr", "chaotic",
        ],
    )?;
    let mut history = if c.history {
        Some(Table::create(
            dir.join("lyapunov.csv"),
            &["mu", "seed", "t", "estimate", "stderr"],
        )?)
    } else {
        None
    };
    let mut per_mu = Vec::new();
    for (mu, spec) in &specs {
        let baseline = match c.threshold {
            Some(_) => None,
            None => Some(symmetric_baseline(spec, &scan)?),
        };
        let threshold = c
            .threshold
            .unwrap_or_else(|| 10.0 * baseline.as_ref().map_or(0.0, |b| b.value.abs()));
        let runs: Vec<(ReducedPoint, LyapunovEstimate)> = (0..c.n_seeds as u64)
            .into_par_iter()
            .map(|i| {
                let r0 = indexed_seed(spec, c.h, cfg.seed, i, &c.seed_box)?;
                Ok((r0, lyapunov_max(spec, &r0, &scan.lyapunov)?))
            })
            .collect::<sepflow::Result<_>>()?;
        let mut hits = 0;
        for (i, (r0, est)) in runs.iter().enumerate() {
            let chaotic = est.value > threshold;
            hits += chaotic as usize;
            let mut row = vec![num(*mu), i.to_string()];
            row.extend(r0.to_array().map(num));
            row.extend([num(est.value), num(est.stderr), (chaotic as u8).to_string()]);
            scan_table.row(row)?;
            if let Some(t) = history.as_mut() {
                for p in &est.history {
                    t.row([
                        num(*mu),
                        i.to_string(),
                        num(p.t),
                        num(p.estimate),
                        num(p.stderr),
                    ])?;
                }
            }
        }
        let mut values: Vec<f64> = runs.iter().map(|(_, e)| e.value).collect();
        values.sort_by(f64::total_cmp);
        per_mu.push(json!({
            "mu": mu,
            "baseline": baseline.as_ref().map(|b| json!({"estimate": b.value, "stderr": b.stderr})),
            "threshold": threshold,
            "chaotic_fraction": hits as f64 / runs.len() as f64,
            "max_estimate": values.last(),
            "median_estimate": values[values.len() / 2],
        }));
    }
    let mut outputs = vec![scan_table.finish()?];
    if let Some(t) = history {
        outputs.push(t.finish()?);
    }
    Ok(Outcome::new(outputs, json!({ "sweep": per_mu })))
}

fn qsd(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, Failure> {
    let c = &cfg.qsd;
    let spec = cfg.hamiltonian.spec();
    spec.validate()?;
    let h = build_hamiltonian(&spec);
    let l = c.lindblad();
    let psi0 = HomogeneousState::new((0..4).map(|k| Complex64::new(c.re[k], c.im[k])).collect())?
        .normalized();
    let schedule = QsdSchedule::new(c.t_end, c.dt, c.sample_every);
    let mut warnings = Vec::new();
    if step_is_coarse(&l, c.dt) {
        warnings.push(format!(
            "dt = {} is coarse for gamma = {}; results may be biased",
            c.dt, c.gamma
        ));
    }

    let ens = ensemble_expectations(&h, &l, &psi0, &schedule, c.n_runs, cfg.seed)?;
    let mut header = vec!["t".to_string()];
    for n in QsdObservables::NAMES {
        header.push(format!("{n}_mean"));
        header.push(format!("{n}_stderr"));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = Table::create(dir.join("ensemble.csv"), &header)?;
    for p in &ens {
        let mut row = vec![num(p.t)];
        for k in 0..3 {
            row.push(num(p.mean[k]));
            row.push(num(p.stderr[k]));
        }
        table.row(row)?;
    }
    let mut outputs = vec![table.finish()?];

    if c.per_run {
        let runs: Vec<Vec<QsdSample>> = (0..c.n_runs as u64)
            .into_par_iter()
            .map(|run| simulate_qsd_run(&h, &l, &psi0, &schedule, cfg.seed, run))
            .collect::<sepflow::Result<_>>()?;
        let mut header = vec!["run", "t"];
        header.extend(QsdObservables::NAMES);
        let mut table = Table::create(dir.join("runs.csv"), &header)?;
        for (run, samples) in runs.iter().enumerate() {
            for s in samples {
                let mut row = vec![run.to_string(), num(s.t)];
                row.extend(s.observables.as_array().map(num));
                table.row(row)?;
            }
        }
        outputs.push(table.finish()?);
    }

    let mut summary = json!({
        "n_runs": c.n_runs,
        "samples": ens.len(),
        "final": ens.last().map(|p| json!({
            "t": p.t,
            "mean": p.mean,
            "stderr": p.stderr,
        })),
    });
    if let Some(threshold) = c.collapse_threshold {
        let stats =
            collapse_statistics(&h, &l, &psi0, c.dt, c.t_end, threshold, c.n_runs, cfg.seed)?;
        let mut table = Table::create(dir.join("collapse.csv"), &["run", "time"])?;
        for (run, t) in stats.times.iter().enumerate() {
            table.row([run.to_string(), t.map(num).unwrap_or_default()])?;
        }
        outputs.push(table.finish()?);
        summary["collapse"] = json!({
            "threshold": threshold,
            "collapsed": stats.times.iter().filter(|t| t.is_some()).count(),
            "median_time": stats.median,
        });
    }
    let mut out = Outcome::new(outputs, summary);
    out.warnings = warnings;
    Ok(out)
}

fn verify(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, Failure> {
    let opts = VerifyOptions {
        seed: cfg.seed,
        inject_constraint_bug: cfg.verify.inject_constraint_bug,
    };
    let ids: Vec<usize> = if cfg.verify.criteria.is_empty() {
        CRITERIA.iter().map(|(id, _)| *id).collect()
    } else {
        cfg.verify.criteria.clone()
    };
    let mut criteria = Vec::new();
    for id in ids {
        let r = run_criterion(id, &opts);
        println!("{}", r.summary());
        criteria.push(r);
    }
    let report = VerifyReport {
        passed: criteria.iter().all(|c| c.passed),
        criteria,
    };
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    std::fs::write(&path, text + "\n")
        .map_err(|e| Failure::Numerical(format!("{}: {e}", path.display())))?;
    let failed = report.criteria.iter().filter(|c| !c.passed).count();
    let mut out = Outcome::new(
        vec![path],
        json!({
            "passed": report.passed,
            "failed": report.criteria.iter().filter(|c| !c.passed).map(|c| c.id).collect::<Vec<_>>(),
            "wall_time_s": report.criteria.iter().map(|c| c.wall_time_s).sum::<f64>(),
        }),
    );
    out.failed = (failed > 0).then_some(failed);
    Ok(out)
}
