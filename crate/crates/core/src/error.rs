use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DssError>;

#[derive(Debug, Error)]
pub enum DssError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scene placement infeasible after {retries} retries: {constraint}")]
    PlacementInfeasible { constraint: String, retries: usize },

    #[error("rt60 {rt60} s unattainable: required absorption {required:.3} exceeds 1")]
    UnattainableRt60 { rt60: f64, required: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<DssError>,
    },
}

impl DssError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DssError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DssError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DssError::Config(_) | DssError::InvalidArgument(_) => 2,
            DssError::Numerical(_) => 4,
            DssError::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DssError::Shape(msg.into()))
}
