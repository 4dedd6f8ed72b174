use std::path::PathBuf;

use itermvs_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MvsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("scene: {0}")]
    Scene(String),
    #[error("scene generation: {0}")]
    Generation(String),
    /// The sample has no pixel with usable ground truth and should be skipped.
    #[error("no valid ground-truth pixels")]
    NoValidGroundTruth,
    #[error("training: {0}")]
    Training(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
}

impl MvsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MvsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, offset: usize, msg: impl Into<String>) -> Self {
        MvsError::Parse {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad inputs rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            MvsError::Config(_)
                | MvsError::Camera(_)
                | MvsError::Parse { .. }
                | MvsError::Scene(_)
                | MvsError::Generation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, MvsError>;
