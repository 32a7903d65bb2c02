//! Config-driven pipeline runner: `train → extract → analyze → crosstask →
//! sweep → report`, each command a thin layer over `circuit_reuse`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

use std::fmt;

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{pipeline, Run};
pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, an invalid config, or missing or unwritable files.
    Config(String),
    /// Training diverged or a computation produced non-finite values.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<circuit_reuse::Error> for CliError {
    fn from(e: circuit_reuse::Error) -> Self {
        use circuit_reuse::Error as E;
        match e {
            E::Diverged { .. } | E::Contract(_) | E::Shape { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}
