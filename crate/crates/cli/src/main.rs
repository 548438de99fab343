//! `qwha` command-line interface.
//!
//! Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numerical failure.

mod args;
mod bench;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;
use qwha_core::ErrorKind;

use crate::args::Cli;

/// A failed run, tagged with the stage that produced it.
#[derive(Debug)]
pub struct Failure {
    pub kind: ErrorKind,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Validation => 2,
            ErrorKind::Io => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

impl From<qwha_core::Error> for Failure {
    fn from(e: qwha_core::Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Prefixes the failure message with a stage name.
pub trait Stage<T> {
    fn stage(self, name: &str) -> CliResult<T>;
}

impl<T, E: Into<Failure>> Stage<T> for Result<T, E> {
    fn stage(self, name: &str) -> CliResult<T> {
        self.map_err(|e| {
            let mut f = e.into();
            f.message = format!("{name}: {}", f.message);
            f
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.threads {
        Some(0) => Err(Failure::validation("--threads must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| commands::run(cli.command)),
            Err(e) => Err(Failure::validation(format!("thread pool: {e}"))),
        },
        None => commands::run(cli.command),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.exit_code())
        }
    }
}
