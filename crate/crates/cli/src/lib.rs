//! Command-line front end. Every command writes its outputs and a
//! `report.json` under the output directory.

pub mod commands;
pub mod config;

use clap::{Parser, Subcommand};
use serde::Serialize;
use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Symbol(#[from] subfinsler::SymbolError),
    #[error(transparent)]
    Field(#[from] subfinsler::FieldError),
    #[error(transparent)]
    Geometry(#[from] subfinsler::geometry::GeometryError),
    #[error(transparent)]
    Flow(#[from] subfinsler::flows::FlowError),
    #[error(transparent)]
    Mollify(#[from] subfinsler::mollify::MollifyError),
    #[error(transparent)]
    Propagate(#[from] subfinsler::propagate::PropagateError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Parser)]
#[command(
    name = "subfinsler",
    version,
    about = "Control distances, flows, mollifiers and finite-speed propagation for first-order operators"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for randomised sweeps.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Gallery symbol name.
    #[arg(long, global = true)]
    pub symbol: Option<String>,
    /// Override any config key, e.g. `--set propagate.t=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distance field from a source set.
    Dist,
    /// First-order wave run with support tracking.
    Propagate,
    /// Second-order wave run through doubling.
    Wave2,
    /// Approximation of a subunit curve by flows over a block sweep.
    Flowapprox,
    /// Mollifier support and commutator sweep.
    Mollify,
    /// Gallery symbols.
    Gallery {
        #[command(subcommand)]
        action: GalleryAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum GalleryAction {
    /// Print the known names.
    List,
    /// Write a symbol manifest and its coefficient fields.
    Export { name: String },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Dist => "dist",
            Command::Propagate => "propagate",
            Command::Wave2 => "wave2",
            Command::Flowapprox => "flowapprox",
            Command::Mollify => "mollify",
            Command::Gallery { action: GalleryAction::List } => "gallery list",
            Command::Gallery { action: GalleryAction::Export { .. } } => "gallery export",
        }
    }
}

/// Written as `report.json` by every command.
#[derive(Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub seed: u64,
    pub passed: bool,
    pub config: config::RunConfig,
    pub results: serde_json::Value,
    pub files: Vec<PathBuf>,
}

pub struct Outcome {
    pub passed: bool,
    pub results: serde_json::Value,
    pub files: Vec<PathBuf>,
}

/// Parses arguments, runs the command and maps the result to an exit code:
/// 0 pass, 1 verification failure, 2 usage or configuration error.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(report) => {
            println!("{}: {}", report.command, if report.passed { "pass" } else { "FAIL" });
            ExitCode::from(if report.passed { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Report, CliError> {
    let mut cfg = config::read_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &cli.symbol {
        cfg.symbol.gallery = name.clone();
        cfg.symbol.manifest = None;
    }
    cfg.validate()?;
    let out_dir = cfg.out_dir();
    std::fs::create_dir_all(&out_dir)?;
    let outcome = match &cli.command {
        Command::Dist => commands::dist(&cfg, &out_dir)?,
        Command::Propagate => commands::propagate(&cfg, &out_dir)?,
        Command::Wave2 => commands::wave2(&cfg, &out_dir)?,
        Command::Flowapprox => commands::flowapprox(&cfg, &out_dir)?,
        Command::Mollify => commands::mollify(&cfg, &out_dir)?,
        Command::Gallery { action: GalleryAction::List } => commands::gallery_list(),
        Command::Gallery { action: GalleryAction::Export { name } } => commands::gallery_export(&cfg, name, &out_dir)?,
    };
    let report = Report {
        command: cli.command.name().to_string(),
        seed: cfg.seed,
        passed: outcome.passed,
        config: cfg,
        results: outcome.results,
        files: outcome.files,
    };
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
