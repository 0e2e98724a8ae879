use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not fit the operation.
    #[error("dimension error in {operand}: {detail}")]
    Dimension { operand: String, detail: String },

    /// Invalid hyper-parameter or configuration value.
    #[error("configuration error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A non-finite value appeared during an iterative procedure.
    #[error("numerical divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    /// Malformed checkpoint, tree file or labels file.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

impl Error {
    pub fn dim(operand: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            operand: operand.into(),
            detail: detail.into(),
        }
    }

    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config { .. } => "config",
            Error::Contract(_) => "contract",
            Error::Divergence { .. } => "divergence",
            Error::Dataset(_) => "dataset",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
