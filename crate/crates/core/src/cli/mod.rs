//! Command-line front end.
//!
//! `liouville <command> --config <path> [--out <dir>] [--seed <int>]`
//!
//! Exit codes: 0 when every residual is under its threshold, 2 when some are
//! not (artifacts are still written), 1 on any error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use thiserror::Error;

pub use commands::{run, Command, Outcome};
pub use config::{parse_config, ConfigDocument, ConfigError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{command}: {source}")]
    Pipeline { command: &'static str, source: crate::Error },
    #[error("no command summaries to bundle in {0}")]
    Missing(PathBuf),
}

impl CliError {
    fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "liouville", version, about = "Integrability checks, action-angle charts and Darboux coordinates")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampling seed; overrides `[task] seed`.
    #[arg(long)]
    seed: Option<u64>,
}

/// Runs the command line and returns the process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&args) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if outcome.passed {
                0
            } else {
                eprintln!("residual thresholds exceeded");
                2
            }
        }
        Err(CliError::Config(e)) => {
            eprintln!("error: {}: {e}", args.config.display());
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(args: &Args) -> Result<Outcome, CliError> {
    let text = fs::read_to_string(&args.config).map_err(|e| CliError::io(&args.config, e))?;
    let mut doc = parse_config(&text)?;
    if let Some(seed) = args.seed {
        doc.task.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| doc.output.dir.clone());
    run(args.command, &doc, &out)
}
