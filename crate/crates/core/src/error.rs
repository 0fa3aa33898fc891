use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad argument to an operation; `field` names the offending input.
    #[error("invalid argument `{field}`: {message}")]
    Argument { field: String, message: String },

    /// Input bytes that could not be parsed at all (bad PNG, bad base64).
    #[error("malformed `{field}`: {message}")]
    Decode { field: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load {path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training error in term `{term}`: {message}")]
    Training { term: String, message: String },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn argument(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Argument {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn decode(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Decode {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Name of the offending input, when the error is about one.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::Argument { field, .. } | Error::Decode { field, .. } => Some(field),
            _ => None,
        }
    }

    pub fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Load {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by user-supplied input rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Argument { .. } | Error::Decode { .. } | Error::Validation(_)
        )
    }
}
