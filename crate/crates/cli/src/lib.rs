//! Library behind the `osigma` binary.
//!
//! Exit status: 0 when every requested computation converged and every
//! verification passed, 1 on a failed or non-converged computation, 2 on
//! a configuration error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;
pub mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Command, Format, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Run(_) => 1,
        }
    }
}

/// Rendered artifact and whether every computation in it succeeded.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub ok: bool,
}

#[derive(Debug, Parser)]
#[command(
    name = "osigma",
    version,
    about = "Variational ground states of the O(N) sigma model"
)]
pub struct Cli {
    /// TOML configuration file. Relative paths are also looked up in
    /// $OSIGMA_CONFIG_DIR.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output path (stdout when absent); overrides output.path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Output format; overrides output.format.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Master seed; sets both `seed` and `solver.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one key, e.g. `--set model.R2=0.05`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Grid solve plus continuum gap solution at one R².
    Solve,
    /// Continuum phase sweep over model.R2_list.
    Sweep,
    /// Run the property suites.
    Verify,
    /// Build a Fock state realising a kernel.
    Decompose {
        /// JSON kernel file `{size, entries: [[re, im], ...]}`.
        #[arg(long)]
        kernel: Option<PathBuf>,
    },
}

impl CliCommand {
    pub fn command(&self) -> Command {
        match self {
            CliCommand::Solve => Command::Solve,
            CliCommand::Sweep => Command::Sweep,
            CliCommand::Verify => Command::Verify,
            CliCommand::Decompose { .. } => Command::Decompose,
        }
    }
}

/// Effective configuration for a parsed command line.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let dir = std::env::var_os(config::CONFIG_DIR_ENV).map(PathBuf::from);
    let path = config::locate(cli.config.as_deref(), dir.as_deref())?;
    let text = match &path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|source| CliError::Io {
            path: p.clone(),
            source,
        })?),
        None => None,
    };
    if let Some(p) = &path {
        log::info!("config {}", p.display());
    }
    let mut c = config::load(text.as_deref().zip(path.as_deref()), &cli.overrides)?;
    if let Some(s) = cli.seed {
        c.seed = s;
        c.solver.seed = s;
    }
    if let Some(out) = &cli.out {
        c.output.path = Some(out.clone());
    }
    if let Some(f) = cli.format {
        c.output.format = f;
    }
    if let CliCommand::Decompose { kernel: Some(k) } = &cli.command {
        c.decompose.kernel = Some(k.clone());
    }
    let command = cli.command.command();
    c.validate(command)?;
    c.command = Some(command);
    Ok(c)
}

/// Run one command and write its artifact. The artifact is written even
/// when a computation failed so the failing case is on record.
pub fn run(cli: &Cli) -> Result<bool, CliError> {
    let c = resolve_config(cli)?;
    let sde = std::env::var("SOURCE_DATE_EPOCH").ok();
    let ts = output::timestamp(&c, sde.as_deref())?;
    let report = match cli.command.command() {
        Command::Solve => commands::cmd_solve(&c, &ts)?,
        Command::Sweep => commands::cmd_sweep(&c, &ts)?,
        Command::Verify => verify::cmd_verify(&c, &ts)?,
        Command::Decompose => commands::cmd_decompose(&c, &ts)?,
    };
    output::emit(c.output.path.as_deref(), &report.text)?;
    Ok(report.ok)
}

pub fn main_with(cli: Cli) -> ExitCode {
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("osigma: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
