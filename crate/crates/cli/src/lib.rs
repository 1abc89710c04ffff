//! Command-line front end: configuration, CSV input and output, and the
//! pipeline commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Status};

#[derive(Debug, Parser)]
#[command(name = "erc", version, about = "Hierarchical exposure models and pooled exposure-response curves")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel work.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the exposure model to each study.
    FitExposure,
    /// Assign trailing-window exposures to outcome periods.
    AssignExposure {
        /// Use posterior draw N instead of posterior means.
        #[arg(long)]
        draw: Option<usize>,
    },
    /// Fit the exposure-response model.
    FitOutcome {
        #[arg(long)]
        restrict_nonneg: bool,
        #[arg(long)]
        hierarchical: bool,
    },
    /// Run the simulation studies.
    Simulate,
    /// Convergence report for a draws file.
    Diagnostics {
        draws: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml("", Path::new("."))?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<Status, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(error::invalid("--threads must be at least 1"));
        }
        // Fails only when a pool already exists, which is then kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Diagnostics { draws } => commands::diagnostics_cmd(draws, cli.out.as_deref()),
        cmd => {
            let cfg = load_config(cli)?;
            match cmd {
                Command::FitExposure => commands::fit_exposure_cmd(&cfg),
                Command::AssignExposure { draw } => commands::assign_exposure_cmd(&cfg, *draw),
                Command::FitOutcome { restrict_nonneg, hierarchical } => {
                    commands::fit_outcome_cmd(&cfg, *restrict_nonneg, *hierarchical)
                }
                Command::Simulate => commands::simulate_cmd(&cfg),
                Command::Diagnostics { .. } => unreachable!(),
            }
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(status) => {
            if status == Status::ConvergenceWarning {
                eprintln!("warning: convergence thresholds exceeded; outputs were written");
            }
            status.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
