use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, malformed, or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument has the wrong shape or length for the model it is fed to.
    #[error("input error: {0}")]
    Input(String),

    /// A pipeline stage needs an artifact that has not been produced yet.
    #[error("missing dependency: {} ({hint})", artifact.display())]
    MissingDependency { artifact: PathBuf, hint: String },

    /// A file could not be decoded. `offset` is the byte position of the fault.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Inverse kinematics ran out of iterations.
    #[error("target unreachable: best residual {residual:.3e} m")]
    Unreachable { residual: f64, best: Vec<f64> },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    /// Process exit status: 1 usage, config or input; 2 missing dependency; 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Parse { .. } | Error::Json(_) => 1,
            Error::MissingDependency { .. } => 2,
            Error::Unreachable { .. } | Error::Io { .. } | Error::Image(_) | Error::Runtime(_) => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
