//! Command-line front end: synthetic data generation, training, evaluation,
//! ablation sweeps and gradient checks.
//!
//! Exit codes: 0 success, 1 usage, 2 validation or I/O, 3 numerical failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

pub use commands::{Cli, Command};
pub use config::{RunConfig, OUTPUT_DIR_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mmlq::Error),
    #[error("gradient check failed for {0} parameter group(s)")]
    Gradcheck(usize),
    #[error("writing output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use mmlq::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Usage(_)) => 1,
            CliError::Core(E::NonFinite { .. } | E::Domain(_) | E::ConstantInput(_)) | CliError::Gradcheck(_) => 3,
            CliError::Core(_) | CliError::Output(_) => 2,
        }
    }
}

/// Parse `args` (program name first) and run the command, writing
/// human-readable progress to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    commands::dispatch(cli, out)
}

/// Entry point used by the binary: returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match commands::dispatch(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(mmlq::Error::Usage("x".into())).exit_code(), 1);
        assert_eq!(CliError::Core(mmlq::Error::Validation("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(mmlq::Error::Checksum { stored: 1, computed: 2 }).exit_code(), 2);
        assert_eq!(CliError::Core(mmlq::Error::NonFinite { op: "loss" }).exit_code(), 3);
        assert_eq!(CliError::Gradcheck(2).exit_code(), 3);
    }
}
