use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. Each variant maps to a stable
/// machine-readable code (see [`Error::code`]) used by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("corrupted file {path}: checksum mismatch")]
    Corruption { path: PathBuf },

    #[error("memory budget exceeded: {required} bytes required, budget is {budget} bytes")]
    Resource { required: u64, budget: u64 },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("logic error: {0}")]
    Logic(String),

    #[error("training diverged at stage {stage}, epoch {epoch}: {detail}")]
    Divergence {
        stage: usize,
        epoch: usize,
        detail: String,
    },

    #[error("missing artifact {path}; run `propmlp {command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Input(_) => "E_INPUT",
            Error::Config(_) => "E_CONFIG",
            Error::Format { .. } => "E_FORMAT",
            Error::Corruption { .. } => "E_CORRUPT",
            Error::Resource { .. } => "E_RESOURCE",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Logic(_) => "E_LOGIC",
            Error::Divergence { .. } => "E_DIVERGED",
            Error::MissingArtifact { .. } => "E_MISSING",
            Error::Validation(_) => "E_VALIDATION",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
