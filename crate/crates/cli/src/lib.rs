//! Experiment runner for the failure predictor: simulation, training,
//! prediction and evaluation, each usable on its own or chained by
//! [`commands::cmd_experiment`].

pub mod commands;
pub mod config;

pub use commands::{
    cmd_evaluate, cmd_experiment, cmd_predict, cmd_simulate, cmd_train, parse_mode, ExperimentOutcome,
    SimulationOutput, TraceRun,
};
pub use config::ExperimentConfig;

use failcast::ErrorKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration at {field}: {message}")]
    Config { field: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{context}: {source}")]
    Stage {
        context: String,
        #[source]
        source: failcast::Error,
    },
}

impl CliError {
    pub fn stage(context: impl Into<String>, source: failcast::Error) -> Self {
        CliError::Stage { context: context.into(), source }
    }

    /// 2 for usage errors, 3 for bad data, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::Stage { source, .. } => match source.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            },
        }
    }
}

/// Attaches a description of the failed step to a core error.
pub(crate) trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for failcast::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::stage(what(), e))
    }
}
