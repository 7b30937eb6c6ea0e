//! Batch front end for phaselab: solve, verify and analyse from TOML
//! configs, writing reports, CSV tables and SVG plots.

pub mod commands;
pub mod config;
pub mod output;
pub mod svg;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::output::{sha256_hex, Format, Header, Report, Sink};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NUMERICS: u8 = 2;
pub const EXIT_SCOPE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "phaselab", version, about = "Allen-Cahn numerical laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for sampled data; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact formats to write.
    #[arg(long, global = true, value_enum, value_delimiter = ',', default_value = "csv,text")]
    pub format: Vec<Format>,
    /// Worker threads for the numerical kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Relax and Newton-solve from the [field] initial data; writes a checkpoint.
    Solve,
    /// Modica, monotonicity, density, spectrum and layer checks on a checkpoint.
    Verify {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Morse index and low spectrum of a checkpoint.
    Index {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Extract graphical level-set layers and their curvature.
    Layers {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Radial Toda system: solve, fit log ends, gap, integrability, stability.
    Toda,
    /// Flatness iteration and end decomposition of a point sample.
    Flatness {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize the pass/fail lines of all reports in the output directory.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Verify { .. } => "verify",
            Command::Index { .. } => "index",
            Command::Layers { .. } => "layers",
            Command::Toda => "toda",
            Command::Flatness { .. } => "flatness",
            Command::Report => "report",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn numerics(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERICS, message: message.into() }
    }

    pub fn config_from(e: phaselab::Error) -> Self {
        Self::config(e.to_string())
    }

    /// Exit code by error class: bad input 1, numerical failure 2, scope gate 3.
    pub fn from_core(e: phaselab::Error) -> Self {
        use phaselab::Error as E;
        let code = match &e {
            E::InvalidGrid(_) | E::InvalidArgument(_) | E::Format(_) | E::Io(_) => EXIT_CONFIG,
            E::ScopeGate { .. } => EXIT_SCOPE,
            _ => EXIT_NUMERICS,
        };
        Self { code, message: e.to_string() }
    }

    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{}: {what}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::config(format!("{e:#}"))
    }
}

impl From<phaselab::Error> for CliError {
    fn from(e: phaselab::Error) -> Self {
        Self::from_core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::config(e.to_string())
    }
}

/// Run one command to completion.
pub fn run(cli: &Cli) -> Result<Report, CliError> {
    if let Some(n) = cli.threads {
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let name = cli.command.name();
    let digest = sha256_hex(format!("{name}\n{}", config.canonical()).as_bytes());
    let header = Header { command: name.to_string(), digest, seed };
    let sink = Sink::new(&cli.out, header, &cli.format)?;
    let checkpoint = match &cli.command {
        Command::Verify { checkpoint }
        | Command::Index { checkpoint }
        | Command::Layers { checkpoint }
        | Command::Flatness { checkpoint } => checkpoint.clone(),
        _ => None,
    };
    let mut ctx = Context { config: &config, sink, seed, checkpoint };
    match cli.command {
        Command::Solve => commands::cmd_solve(&mut ctx),
        Command::Verify { .. } => commands::cmd_verify(&mut ctx),
        Command::Index { .. } => commands::cmd_index(&mut ctx),
        Command::Layers { .. } => commands::cmd_layers(&mut ctx),
        Command::Toda => commands::cmd_toda(&mut ctx),
        Command::Flatness { .. } => commands::cmd_flatness(&mut ctx),
        Command::Report => commands::cmd_report(&mut ctx),
    }
}
