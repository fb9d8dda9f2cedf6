//! Experiment driver: `sepflow <kind> [--config PATH] [--seed N] [--out DIR] [--threads N]`.
//!
//! Exit status 0 on success, 1 on a configuration error and 2 on a
//! numerical failure or a failed verification.

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Kind};
use output::{Manifest, Versions};
use run::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "sepflow",
    version,
    about = "Two-qubit geometric dynamics experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment configuration; defaults are used when absent.
    #[arg(long, global = true, env = "SEPFLOW_CONFIG")]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true, env = "SEPFLOW_SEED")]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true, env = "SEPFLOW_OUT")]
    out: Option<PathBuf>,

    /// Worker threads for ensembles and scans; 0 picks the core count.
    #[arg(long, global = true, env = "SEPFLOW_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Unconstrained geometric flow on CP^3.
    Flow,
    /// Flow restricted to the separable submanifold.
    Constrained,
    /// Poincaré sections at q2 = 0 on an energy shell.
    Poincare,
    /// Largest Lyapunov exponents over shell seeds.
    Lyapunov,
    /// Quantum state diffusion ensembles.
    Qsd,
    /// The verification suite.
    Verify,
    /// Print the default configuration of a kind.
    Init {
        #[arg(value_enum)]
        kind: Kind,
    },
}

impl Command {
    fn kind(&self) -> Option<Kind> {
        Some(match self {
            Command::Flow => Kind::Flow,
            Command::Constrained => Kind::Constrained,
            Command::Poincare => Kind::Poincare,
            Command::Lyapunov => Kind::Lyapunov,
            Command::Qsd => Kind::Qsd,
            Command::Verify => Kind::Verify,
            Command::Init { .. } => return None,
        })
    }
}

fn resolve(cli: &Cli, kind: Kind) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_for(kind),
    };
    if cfg.kind != kind {
        return Err(format!(
            "kind: the config describes a {} experiment but the {} subcommand was given",
            cfg.kind.name(),
            kind.name()
        ));
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli, kind: Kind) -> Result<bool, Failure> {
    let cfg = resolve(cli, kind).map_err(Failure::Validation)?;
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure::Numerical(format!("thread pool: {e}")))?;
    }
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Numerical(format!("{}: {e}", dir.display())))?;

    let start = Instant::now();
    let outcome = run::run(&cfg, dir)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let manifest = Manifest {
        kind: kind.name(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        versions: Versions {
            sepflow_cli: env!("CARGO_PKG_VERSION"),
            sepflow_core: sepflow::VERSION,
        },
        config: cfg.echo(),
        outputs: outcome
            .outputs
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        wall_time_s: start.elapsed().as_secs_f64(),
        warnings: outcome.warnings.clone(),
        summary: outcome.summary.clone(),
    };
    let path = manifest.write(dir)?;
    for p in &outcome.outputs {
        eprintln!("wrote {}", p.display());
    }
    eprintln!("wrote {}", path.display());
    if let Some(n) = outcome.failed {
        eprintln!("verification failed: {n} criteria");
    }
    Ok(outcome.failed.is_none())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(kind) = cli.command.kind() else {
        if let Command::Init { kind } = cli.command {
            print!("{}", ExperimentConfig::default_for(kind).to_toml());
        }
        return ExitCode::SUCCESS;
    };
    match execute(&cli, kind) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
