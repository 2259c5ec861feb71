use std::path::PathBuf;

use thiserror::Error;

/// Why a letter string could not be turned into a peptide.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SequenceError {
    #[error("unknown residue letter {letter:?} at position {position}")]
    UnknownLetter { letter: char, position: usize },
    #[error("expected 5 residues, got {len}")]
    WrongLength { len: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Sequence(#[from] SequenceError),

    #[error("token sequence is not a valid frame ({reason:?})")]
    InvalidTokens { reason: crate::alphabet::ValidityReason },

    #[error("value {value} is outside the domain of {operation}")]
    Domain { operation: &'static str, value: f64 },

    #[error("{0} requires a non-empty input")]
    Empty(&'static str),

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{what}: need at least {needed}, have {available}")]
    Insufficient {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact {}", path.display())]
    MissingArtifact { path: PathBuf },

    #[error("incompatible artifact {}: {reason}", path.display())]
    IncompatibleArtifact { path: PathBuf, reason: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {}: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input or missing/incompatible upstream artifacts,
    /// as opposed to failures while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingArtifact { .. }
                | Error::IncompatibleArtifact { .. }
                | Error::Parse { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
