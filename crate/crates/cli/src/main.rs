//! `terrain-uq` command-line runner.

mod commands;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "terrain-uq", version, about = "Terrain uncertainty fields, forecasts and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; defaults apply to omitted fields
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random draw; required by stochastic subcommands
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Directory to write artifacts into; nothing is written without it
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the machine-readable report on stdout instead of a summary
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the dense-oracle, gradient, solver and sampling checks
    OracleCheck,
    /// Fit a field to samples of a planted field under a field of view
    Fit,
    /// Roll the robot out on a generated scenario's mean terrain
    Simulate,
    /// Monte Carlo trajectory forecast on a generated scenario
    Forecast,
    /// Score Det, Indep and SC over a batch of seeded scenarios
    Compare,
    /// Score a forecast or a single predicted trajectory against ground truth
    Metrics,
}

#[derive(Debug)]
pub enum CliError {
    /// Checks ran but at least one failed.
    Check(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Options shared by every subcommand.
pub struct Context {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub json: bool,
}

impl Context {
    /// Parses the config file, or returns defaults when none was given.
    pub fn load<T: DeserializeOwned + Default>(&self) -> CliResult<T> {
        let Some(path) = &self.config else {
            return Ok(T::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| {
            let msg = e.to_string();
            let suffix = format!(" at line {} column {}", e.line(), e.column());
            let msg = msg.strip_suffix(&suffix).unwrap_or(&msg);
            CliError::Config(format!("{}:{}:{}: {msg}", path.display(), e.line(), e.column()))
        })
    }

    /// Resolves a path from the config against the config's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        match self.config.as_deref().and_then(Path::parent) {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn require_seed(&self, command: &str) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Config(format!("{command} is stochastic and needs --seed")))
    }

    /// Creates the output directory; `None` when no `--out` was given.
    pub fn out_dir(&self) -> CliResult<Option<&Path>> {
        match &self.out {
            Some(dir) => {
                fs::create_dir_all(dir)
                    .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
                Ok(Some(dir))
            }
            None => Ok(None),
        }
    }

    /// Prints `report` as JSON under `--json`, otherwise the text summary.
    pub fn emit<T: Serialize>(&self, report: &T, summary: impl FnOnce() -> String) -> CliResult<()> {
        if self.json {
            println!("{}", to_json(report)?);
        } else {
            print!("{}", summary());
        }
        Ok(())
    }
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(CliError::runtime)
}

pub fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<()> {
    write_file(dir, name, to_json(value)? + "\n")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Context {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        json: cli.json,
    };
    let result = match cli.command {
        Command::OracleCheck => commands::oracle_check(&ctx),
        Command::Fit => commands::fit(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::Forecast => commands::forecast(&ctx),
        Command::Compare => commands::compare(&ctx),
        Command::Metrics => commands::metrics(&ctx),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
