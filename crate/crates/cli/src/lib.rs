//! Batch driver for the forced Kepler library.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// Process exit codes.
pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NO_ORBIT: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    NoOrbit(String),
    Numeric(String),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::NoOrbit(m) => write!(f, "no orbit found: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<forced_kepler::Error> for CliError {
    fn from(e: forced_kepler::Error) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::NoOrbit(_) => EXIT_NO_ORBIT,
            CliError::Numeric(_) | CliError::Io(_) => EXIT_NUMERIC,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fkepler", version, about = "Periodic orbits of the time-periodically forced Kepler problem")]
pub struct Cli {
    /// JSON configuration file, or `-` for stdin.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated output formats: csv, json, svg.
    #[arg(long, global = true, value_delimiter = ',')]
    pub format: Option<Vec<String>>,
    /// Integrator tolerance, used for both relative and absolute error.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form data of the periodic manifolds: n,L_n,tau_n,S_n,A0_n.
    ActionTable {
        #[arg(long)]
        n_max: Option<u32>,
    },
    /// Integrate one trajectory in physical, Levi-Civita or Moser variables.
    Integrate,
    /// Find one periodic orbit near the n-th periodic manifold.
    FindOrbit {
        #[arg(long)]
        n: Option<u32>,
    },
    /// Family of orbits over n_range.
    Sweep,
    /// Orbit family near a primary of a restricted three-body problem.
    Rtbp,
    /// Localization check for each kappa.
    Localization,
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("fkepler: {e}");
            e.exit_code()
        }
    }
}
