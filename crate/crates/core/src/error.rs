use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PemoeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PemoeError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },

    #[error("query {query_id} references missing gallery item id {item_id}")]
    DanglingReference { query_id: u64, item_id: u64 },

    #[error("invalid value for `{name}`: {reason}")]
    InvalidArgument { name: String, reason: String },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("degenerate embedding in {context}: zero norm before normalization")]
    DegenerateEmbedding { context: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("external refiner `{command}` failed ({status}): {stderr}")]
    ExternalCommand {
        command: String,
        status: String,
        stderr: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PemoeError {
    pub fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        PemoeError::InvalidArgument {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        PemoeError::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PemoeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error comes from bad user input (files, flags, config)
    /// rather than from a failure while computing.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            PemoeError::DegenerateEmbedding { .. }
                | PemoeError::NonFinite { .. }
                | PemoeError::ExternalCommand { .. }
                | PemoeError::Io { .. }
        )
    }
}
