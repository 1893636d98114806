use battsynth_core::{DataError, ModelError, NumError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Training(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn io(what: &str, e: impl std::fmt::Display) -> Self {
        CliError::Other(format!("{what}: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::Config(_) | ModelError::Schema(_) | ModelError::Data(_) => CliError::Config(msg),
            ModelError::Diverged { .. } | ModelError::NanLoss { .. } | ModelError::Num(NumError::NonFinite { .. }) => {
                CliError::Training(msg)
            }
            ModelError::Checkpoint(_) => CliError::MissingArtifact(msg),
            _ => CliError::Other(msg),
        }
    }
}
