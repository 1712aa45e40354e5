//! `stirmix` — boundary-driven stirring of a passive scalar on the unit
//! disk: forward transport runs, cost scans over control amplitudes,
//! adjoint-based control optimization with checkpoint/resume, and
//! numerical validation suites.
//!
//! Exit codes: 0 success, 1 validation failure, 2 configuration error,
//! 3 solver or I/O failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use output::DirLock;

/// Error bucket determining the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration: unparseable file, unknown key, inconsistent
    /// values, locked output directory. Exit 2.
    Config(String),
    /// A validation suite ran to completion and at least one check failed.
    /// Exit 1.
    Validation(String),
    /// The solver or an output write failed at runtime. Exit 3.
    Runtime(String),
}

impl From<stirmix::Error> for CliError {
    fn from(e: stirmix::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "stirmix",
    version,
    about = "Optimal tangential boundary control of scalar mixing in unsteady Stokes flow on the unit disk"
)]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable, applied in order).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Output directory (overrides the `outdir` key).
    #[arg(long, value_name = "DIR", global = true)]
    outdir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the disk mesh; export statistics and a VTK view.
    Mesh,
    /// Solve and cache the flow response of every control basis element.
    BasisVel,
    /// Transport the initial scalar under fixed control coefficients;
    /// export time series and field snapshots.
    Forward,
    /// Evaluate the cost along a one-parameter control family.
    Scan,
    /// Gradient descent from alpha0 on a single mesh.
    Optimize,
    /// Coarse-to-fine descent over the configured mesh list.
    Relay,
    /// Run one numerical validation suite against stored reference values.
    Validate {
        /// One of: stokes, dg, duality, energy, gradcheck.
        suite: String,
    },
    /// Continue an interrupted optimize/relay from its checkpoint.
    Resume,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set, cli.outdir.as_deref())?;
    let _lock = DirLock::acquire(&cfg.outdir)?;
    match &cli.command {
        Command::Mesh => commands::cmd_mesh(&cfg),
        Command::BasisVel => commands::cmd_basis_vel(&cfg),
        Command::Forward => commands::cmd_forward(&cfg),
        Command::Scan => commands::cmd_scan(&cfg),
        Command::Optimize => commands::cmd_optimize(&cfg),
        Command::Relay => commands::cmd_relay(&cfg),
        Command::Validate { suite } => commands::cmd_validate(&cfg, suite),
        Command::Resume => commands::cmd_resume(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("validation failure: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("run failed: {msg}");
            ExitCode::from(3)
        }
    }
}
