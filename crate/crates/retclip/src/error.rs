use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("patient {patient_id}: {message}")]
    Ingestion { patient_id: String, message: String },
    #[error(transparent)]
    Core(#[from] retclip_core::Error),
}

impl IoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Everything a command can fail with, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, missing inputs, invalid configuration: exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failures while running: exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { ref source, .. } if source.kind() != std::io::ErrorKind::NotFound => {
                Self::Runtime(e.to_string())
            }
            IoError::Core(ref c) if !is_input_error(c) => Self::Runtime(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => io.into(),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<retclip_core::Error> for CliError {
    fn from(e: retclip_core::Error) -> Self {
        if is_input_error(&e) {
            Self::Usage(e.to_string())
        } else {
            Self::Runtime(e.to_string())
        }
    }
}

fn is_input_error(e: &retclip_core::Error) -> bool {
    use retclip_core::Error::*;
    matches!(e, Config(_) | Vocabulary { .. } | EmptyClass(_))
}
