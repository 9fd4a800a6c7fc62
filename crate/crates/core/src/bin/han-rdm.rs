use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use han_rdm::pipeline::{self, RunConfig, RunOptions};
use han_rdm::{verify, Error};

#[derive(Parser)]
#[command(version, about = "Entanglement entropies of the transverse-field Ising chain by hierarchical neural sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Retrain grid points that already have checkpoints.
    #[arg(long, global = true)]
    force: bool,
    /// Override samples per matrix element.
    #[arg(long, global = true)]
    ns: Option<usize>,
    /// Override bootstrap replicas.
    #[arg(long, global = true)]
    bootstrap: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one hierarchy per grid point.
    Train,
    /// Sample all density-matrix elements from the checkpoints.
    Estimate,
    /// Spectra and entropies from stored weight streams.
    Entropy,
    /// Combined k and dtau extrapolation with plots.
    Extrapolate,
    /// Exact transfer-matrix and ground-state references.
    Oracle,
    /// Run the acceptance checks.
    Verify {
        /// Include the multi-hour stochastic pipeline.
        #[arg(long)]
        slow: bool,
    },
    /// Summary of fits against exact values.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) | Error::Fit(_) | Error::NotSymmetric(_) | Error::InfeasibleMask(_) => 2,
        _ => 1,
    }
}

fn load(cli: &Cli) -> han_rdm::Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::InvalidParams("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.ns {
        cfg.estimator.n_samples = n;
    }
    if let Some(b) = cli.bootstrap {
        cfg.estimator.bootstrap = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> han_rdm::Result<bool> {
    let opts = RunOptions { jobs: cli.jobs, force: cli.force };
    match cli.command {
        Command::Verify { slow } => {
            let scratch = std::env::temp_dir().join(format!("han-rdm-verify-{}", std::process::id()));
            let outcomes = verify::run_all(&scratch, slow, cli.jobs);
            let _ = std::fs::remove_dir_all(&scratch);
            for o in &outcomes {
                println!("{}", o.line());
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
        Command::Train => {
            for (p, action) in pipeline::cmd_train(&load(cli)?, opts)? {
                println!("{}: {action:?}", p.name());
            }
        }
        Command::Estimate => {
            let cfg = load(cli)?;
            pipeline::cmd_estimate(&cfg, opts)?;
            println!("estimates written to {}", cfg.paths.reports.display());
        }
        Command::Entropy => {
            let cfg = load(cli)?;
            let rows = pipeline::cmd_entropy(&cfg)?;
            println!("{} entropies written to {}", rows.len(), cfg.report("entropies.csv").display());
        }
        Command::Extrapolate => {
            let cfg = load(cli)?;
            let ex = pipeline::cmd_extrapolate(&cfg)?;
            for f in &ex.fits {
                println!("{} l={}: S = {:.6} +- {:.6}", f.order.label(), f.l, f.s, f.total_err);
            }
        }
        Command::Oracle => {
            let cfg = load(cli)?;
            pipeline::cmd_oracle(&cfg)?;
            println!("references written to {}", cfg.paths.reports.display());
        }
        Command::Report => print!("{}", pipeline::cmd_report(&load(cli)?)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
