use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("catalog: {0}")]
    Catalog(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format: {0}")]
    Format(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {0}")]
    Diverged(usize),

    #[error("feature id mismatch: store has {store}, checkpoint has {checkpoint}")]
    FeatureIdMismatch { store: String, checkpoint: String },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short stable tag, used by the command line for machine-parsable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Invalid(_) => "invalid",
            Error::Catalog(_) => "catalog",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::NonFiniteGradient(_) => "nan_gradient",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged(_) => "diverged",
            Error::FeatureIdMismatch { .. } => "feature_id",
            Error::ConfigMismatch(_) => "config",
            Error::Io(_) => "io",
        }
    }
}
