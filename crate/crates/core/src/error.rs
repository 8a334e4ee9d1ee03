use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("backbone fault: {0}")]
    BackboneFault(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss {loss} at iteration {iteration} (batch samples {batch_ids:?})")]
    NonFiniteLoss {
        iteration: u64,
        loss: f64,
        batch_ids: Vec<String>,
    },

    #[error("incompatible registry: {0}")]
    IncompatibleRegistry(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips any stage tags and returns the innermost error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by bad configuration or invocation rather than
    /// a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self.root(),
            Error::Config(_)
                | Error::Input(_)
                | Error::Shape(_)
                | Error::IncompatibleRegistry(_)
                | Error::Decode { .. }
        )
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
