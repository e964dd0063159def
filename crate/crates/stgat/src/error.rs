use std::io;
use std::path::{Path, PathBuf};

use stgat_core::Error as CoreError;

/// Failures of the file formats, harness and CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}, line {line}: {message}", path.display())]
    Csv { path: PathBuf, line: u64, message: String },
    #[error("{}: duplicate timestamp {timestamp}", path.display())]
    DuplicateTimestamp { path: PathBuf, timestamp: i64 },
    #[error("{}: {message}", path.display())]
    ModelFile { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    /// The inputs of one command disagree with each other, such as a model
    /// trained on a different channel layout than the corpus.
    #[error("{0}")]
    Conflict(String),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<String>),
    #[error("run {method} seed {seed}: {source}")]
    Run {
        method: String,
        seed: u64,
        source: Box<Error>,
    },
    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Exit status: 1 for invalid input or configuration, 2 for failures
    /// while computing.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) => match e {
                CoreError::NonFinite { .. }
                | CoreError::NonFiniteLoss { .. }
                | CoreError::TapeConsumed
                | CoreError::NonScalarLoss(_) => 2,
                _ => 1,
            },
            Error::Io { .. } | Error::GradcheckFailed(_) | Error::Format(_) => 2,
            Error::Run { source, .. } => source.exit_code(),
            Error::Csv { .. }
            | Error::DuplicateTimestamp { .. }
            | Error::ModelFile { .. }
            | Error::Config(_)
            | Error::Conflict(_) => 1,
        }
    }

    /// Pipeline stage the error comes from, used to prefix messages.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Core(e) => match e {
                CoreError::ConstantChannel(_)
                | CoreError::SplitTooShort { .. }
                | CoreError::NonMonotonicTimestamps(_)
                | CoreError::DegenerateSynthesis(_) => "data",
                CoreError::NonFiniteLoss { .. } => "training",
                CoreError::ParamMismatch(_) => "model",
                CoreError::InvalidConfig(_) => "config",
                _ => "tensor",
            },
            Error::Csv { .. } | Error::DuplicateTimestamp { .. } => "data",
            Error::ModelFile { .. } => "model",
            Error::Io { .. } => "io",
            Error::Config(_) | Error::Conflict(_) => "config",
            Error::GradcheckFailed(_) => "gradcheck",
            Error::Run { source, .. } => source.module(),
            Error::Format(_) => "report",
        }
    }
}
