use std::path::{Path, PathBuf};

use simunc_core::ablation::AblationError;
use simunc_core::checkpoint::CheckpointError;
use simunc_core::embeddings::EmbeddingError;
use simunc_core::evaluation::EvalError;
use simunc_core::numerics::NumericsError;
use simunc_core::trainer::TrainError;

/// Exit status of a failed command.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("gradient check failed: worst relative error {worst:.3e} >= {tolerance:.0e}")]
    GradcheckFailed { worst: f64, tolerance: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Data(_) | Self::Io { .. } => EXIT_DATA,
            Self::Numeric(_) | Self::GradcheckFailed { .. } => EXIT_NUMERIC,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::InvalidSpec(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::Precondition(_) => Self::Config(e.to_string()),
            _ => Self::Numeric(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(format!("checkpoint: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Self::Config(m),
            TrainError::Numerics(n) => n.into(),
            TrainError::Checkpoint(c) => c.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Numerics(n) => n.into(),
            EvalError::NoEpisodes => Self::Config(e.to_string()),
            EvalError::Episode(_) => Self::Data(e.to_string()),
        }
    }
}

impl From<AblationError> for CliError {
    fn from(e: AblationError) -> Self {
        match e {
            AblationError::Train(t) => t.into(),
            AblationError::Eval(v) => v.into(),
        }
    }
}
