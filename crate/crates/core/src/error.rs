use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or layer stacks that do not chain, invalid hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or inconsistent dataset contents, labels out of range, missing frames.
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error in {layer}: {detail}")]
    Numeric { layer: String, detail: String },
    /// API used out of order (e.g. an optimizer step with no gradients).
    #[error("state error: {0}")]
    State(String),
    /// Invalid command-line or request parameters.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    /// Bad magic, version or truncated binary file.
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Unsupported(_) => 2,
            Error::Config(_)
            | Error::Data(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::Numeric { .. } | Error::State(_) => 4,
        }
    }
}
