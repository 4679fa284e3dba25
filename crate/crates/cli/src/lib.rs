//! Command-line front end: synthetic data, training, evaluation, prediction
//! and report rendering.

pub mod commands;
pub mod config;

use std::ffi::OsString;

use clap::Parser;

pub use commands::{Cli, Command};

/// Failures grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Checkpoint(_) => 3,
        }
    }
}

impl From<swinca_core::Error> for CliError {
    fn from(e: swinca_core::Error) -> Self {
        match e {
            swinca_core::Error::Checkpoint(c) => CliError::Checkpoint(c.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
