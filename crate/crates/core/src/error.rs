use thiserror::Error;

/// Error type shared by every module of the crate.
///
/// Each variant maps to a stable machine-parseable code (see [`Error::code`])
/// which the command-line front end prints as an error prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {message}")]
    Image { path: String, message: String },
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Argument(_) => "E_ARGUMENT",
            Error::State(_) => "E_STATE",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Load(_) => "E_LOAD",
            Error::Io { .. } => "E_IO",
            Error::Image { .. } => "E_IMAGE",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
