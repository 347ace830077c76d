//! The `gem` command-line tool: argument parsing, configuration, the batch
//! subcommands and the read-only model server.

pub mod args;
pub mod commands;
pub mod config;
pub mod media;
pub mod serve;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use gem_core::GemError;

/// Exit status 2: bad arguments, missing paths, unreadable configuration.
pub const EXIT_USAGE: u8 = 2;
/// Exit status 3: inputs that exist but cannot be used.
pub const EXIT_DATA: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl From<GemError> for CliError {
    fn from(e: GemError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

/// Fails with a usage error when `path` does not exist.
pub fn require(path: &Path) -> CliResult<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(usage(format!("{} does not exist", path.display())))
    }
}

pub fn require_dir(path: &Path) -> CliResult<&Path> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(usage(format!("{} is not a directory", path.display())))
    }
}

pub fn run() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match args::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gem: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
