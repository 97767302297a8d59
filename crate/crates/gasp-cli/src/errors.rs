//! CLI error type and its mapping onto process exit codes.

use gasp_core::lang::LangError;
use gasp_core::losses::LossError;
use gasp_core::model::ModelError;
use gasp_core::scenegen::SceneError;
use gasp_core::trainer::TrainError;
use gasp_core::{autodiff::DiffError, eval::EvalError, geometry::GeometryError};

/// Exit code for configuration, format, or dataset validation failures.
pub const EXIT_VALIDATION: u8 = 2;
/// Exit code for numerical failures: divergence or a failed gradient check.
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(
        "checkpoint/config shape mismatch for `{name}`: checkpoint has {found:?}, config wants {expected:?}"
    )]
    ConfigMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl CliError {
    /// 2 for validation problems, 3 for numerical ones.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::GradCheckFailed(_) => EXIT_NUMERICAL,
            CliError::Train(TrainError::Diverged { .. })
            | CliError::Train(TrainError::NonFiniteGradient(_)) => EXIT_NUMERICAL,
            _ => EXIT_VALIDATION,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Serde(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_validation_from_numerics() {
        assert_eq!(CliError::InvalidConfig("x".into()).exit_code(), 2);
        assert_eq!(CliError::CorruptCheckpoint("x".into()).exit_code(), 2);
        assert_eq!(CliError::GradCheckFailed("x".into()).exit_code(), 3);
        let diverged =
            CliError::Train(TrainError::Diverged { step: 3, loss: 1e9, last_checkpoint: None });
        assert_eq!(diverged.exit_code(), 3);
    }
}
