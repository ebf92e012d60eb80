use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or infinite values where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A kernel failed while evaluating a layer stack.
    #[error("layer {index}: {source}")]
    AtLayer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Malformed file contents. `offset` is the byte offset where parsing
    /// stopped, when known.
    #[error("format error{}: {message}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format {
        offset: Option<usize>,
        message: String,
    },

    /// Structurally well-formed data violating a semantic invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    /// Input image could not be read or decoded.
    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(offset: impl Into<Option<usize>>, message: impl Into<String>) -> Self {
        Error::Format {
            offset: offset.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips any `AtLayer` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtLayer { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_shape(&self) -> bool {
        matches!(self.root(), Error::Shape(_))
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.root(), Error::Numeric(_))
    }

    pub fn is_format(&self) -> bool {
        matches!(self.root(), Error::Format { .. })
    }

    pub fn is_validation(&self) -> bool {
        matches!(self.root(), Error::Validation(_))
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_))
    }

    pub fn is_input(&self) -> bool {
        matches!(self.root(), Error::Input(_))
    }
}
