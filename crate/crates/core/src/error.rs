use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading a checkpoint file. Each variant has a stable numeric code.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected RSCA)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("parameter manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("config hash mismatch: checkpoint {found:#010x}, model {expected:#010x}")]
    ConfigMismatch { expected: u32, found: u32 },
}

impl CheckpointError {
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadMagic => 10,
            CheckpointError::UnsupportedVersion(_) => 11,
            CheckpointError::Truncated(_) => 12,
            CheckpointError::ManifestMismatch(_) => 13,
            CheckpointError::ConfigMismatch { .. } => 14,
        }
    }
}
