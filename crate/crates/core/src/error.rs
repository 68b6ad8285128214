use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TanoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TanoError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A pipeline stage failed; carries the stage name and the seed needed to replay it.
    #[error("stage `{stage}` failed (replay seed {seed}): {source}")]
    Stage {
        stage: String,
        seed: u64,
        #[source]
        source: Box<TanoError>,
    },
}

impl TanoError {
    pub fn dim(msg: impl Into<String>) -> Self {
        TanoError::Dimension(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        TanoError::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TanoError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        TanoError::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &str, seed: u64) -> Self {
        TanoError::Stage {
            stage: stage.to_string(),
            seed,
            source: Box::new(self),
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 = validation, 3 = numeric failure, 4 = I/O or format error.
    pub fn exit_code(&self) -> i32 {
        match self {
            TanoError::Dimension(_) | TanoError::Validation(_) | TanoError::Contract(_) => 2,
            TanoError::Numeric(_) => 3,
            TanoError::Format { .. } | TanoError::Io { .. } | TanoError::Json { .. } => 4,
            TanoError::Stage { source, .. } => source.exit_code(),
        }
    }
}
