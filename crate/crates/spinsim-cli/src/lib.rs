//! Command-line surface for the spin-pair simulator: config-driven
//! simulation, trace fitting, noise generation and CPMG scaling analysis,
//! with CSV traces, a `result.json` record and optional SVG plots.
//!
//! Exit codes: 0 success, 2 configuration error, 3 fit non-convergence,
//! 4 I/O error. All diagnostics go to standard error.

mod commands;
pub mod config;
pub mod plot;
pub mod trace;

use clap::{Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::path::PathBuf;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FIT: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Fit(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Fit(_) => EXIT_FIT,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<spinsim::spinpair::SpinPairError> for CliError {
    fn from(e: spinsim::spinpair::SpinPairError) -> Self {
        match e {
            spinsim::spinpair::SpinPairError::Fit(f) => CliError::Fit(f.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<spinsim::bath::BathError> for CliError {
    fn from(e: spinsim::bath::BathError) -> Self {
        use spinsim::bath::BathError;
        match e {
            BathError::Fit(f) => CliError::Fit(f.to_string()),
            BathError::FitDidNotConverge(_) | BathError::SweepNotBracketed(_) => {
                CliError::Fit(e.to_string())
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<spinsim::fit::FitError> for CliError {
    fn from(e: spinsim::fit::FitError) -> Self {
        CliError::Fit(e.to_string())
    }
}

impl From<spinsim::qdyn::QdynError> for CliError {
    fn from(e: spinsim::qdyn::QdynError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<spinsim::pulses::PulseError> for CliError {
    fn from(e: spinsim::pulses::PulseError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "spinsim",
    version,
    about = "Spin-pair defect simulator and trace-fitting toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "lower")]
pub enum Protocol {
    Rabi,
    Odmr,
    T1,
    Ramsey,
    Hahn,
    Cpmg,
    Charge,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Rabi => "rabi",
            Protocol::Odmr => "odmr",
            Protocol::T1 => "t1",
            Protocol::Ramsey => "ramsey",
            Protocol::Hahn => "hahn",
            Protocol::Cpmg => "cpmg",
            Protocol::Charge => "charge",
        }
    }
}

#[derive(Debug, Clone, Parser)]
pub struct CommonOpts {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config's output.dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// RNG seed (overrides the config's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write an SVG plot of the produced traces.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a measurement protocol and write contrast traces.
    Simulate {
        #[arg(value_enum)]
        protocol: Protocol,
        #[command(flatten)]
        opts: CommonOpts,
        /// Also write the compiled pulse sequence as sequence.json.
        #[arg(long)]
        dump_seq: bool,
    },
    /// Fit a model to a trace file.
    Fit {
        /// Model name: lorentzian, exp_decay, damped_sin, stretched_exp,
        /// power_law or line_through_origin.
        model: String,
        /// Input trace CSV.
        trace: PathBuf,
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Generate classical noise records.
    Noise {
        #[command(subcommand)]
        kind: NoiseKind,
    },
    /// CPMG coherence-time scaling: T2 versus pulse number plus the fitted
    /// power-law exponent.
    Scaling {
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Synthesize a g-factor calibration line and fit it.
    Gfactor {
        #[command(flatten)]
        opts: CommonOpts,
    },
}

#[derive(Debug, Subcommand)]
pub enum NoiseKind {
    /// Ornstein-Uhlenbeck frequency noise trace with its sample statistics.
    Ou {
        #[command(flatten)]
        opts: CommonOpts,
    },
}

/// Parse arguments, run, and translate errors to the documented exit codes.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
