//! `dscnet` command-line front end.
//!
//! Exit codes: 0 success, 1 verification or run failure, 2 configuration
//! error, 3 I/O or container error.

pub mod commands;
pub mod config;

use std::fmt;

pub use commands::{ablate, eval, gradcheck, synth, train, write_manifest, AblationRow, ABLATION_CELLS};
pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    /// A check ran and failed, or a run aborted.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dscnet::Error> for CliError {
    fn from(e: dscnet::Error) -> Self {
        use dscnet::Error as E;
        let msg = e.to_string();
        match e {
            E::BadConfig(_) | E::EvenKernel(_) | E::OddChannels(_) | E::BadInputSize(_) => CliError::Config(msg),
            E::Io(_)
            | E::BadMagic(_)
            | E::BadDtype(_)
            | E::TruncatedPayload { .. }
            | E::ManifestMismatch(_)
            | E::BadMask(_)
            | E::Json(_) => CliError::Io(msg),
            _ => CliError::Failed(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
