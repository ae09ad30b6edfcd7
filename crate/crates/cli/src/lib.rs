//! Library side of the `priocomm` command: run configs and presets, the
//! train / eval / plot commands, and the SVG learning-curve renderer.

pub mod commands;
pub mod config;
pub mod plot;

use std::fmt;

pub use commands::{cmd_eval, cmd_plot, cmd_train, EvalArgs, PlotArgs, TrainArgs};
pub use config::{preset, Preset, RunConfig, PRESETS};

/// Command failure, classified by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad usage, configuration, input file or checkpoint: exit 2.
    Config(String),
    /// Training diverged or produced non-finite values: exit 3.
    Numeric(String),
    /// Filesystem or other runtime failure: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn context(self, ctx: impl fmt::Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{ctx}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{ctx}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<priocomm_core::Error> for CliError {
    fn from(err: priocomm_core::Error) -> Self {
        use priocomm_core::Error as E;
        match err {
            E::Config(_) | E::Input(_) | E::Checkpoint(_) => CliError::Config(err.to_string()),
            E::Numeric(_) => CliError::Numeric(err.to_string()),
            E::Protocol(_) | E::Io(_) => CliError::Runtime(err.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Runtime(err.to_string())
    }
}
