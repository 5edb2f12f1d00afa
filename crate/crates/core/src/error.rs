use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the engine.
///
/// Format errors carry the byte offset at which the problem was detected.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic at byte {offset}: expected \"{expected}\"")]
    BadMagic { offset: u64, expected: &'static str },
    #[error("unsupported format version {found:?} at byte {offset}")]
    UnsupportedVersion { offset: u64, found: String },
    #[error("truncated file at byte {offset}: {what}")]
    TruncatedFile { offset: u64, what: String },
    #[error("dimension mismatch at byte {offset}: {what}")]
    DimensionMismatch { offset: u64, what: String },
    #[error("non-finite value at byte {offset}")]
    NonFiniteValue { offset: u64 },
    #[error("duplicate id {id} at byte {offset}")]
    DuplicateId { offset: u64, id: u64 },
    #[error("invalid label {label} at byte {offset}")]
    InvalidLabel { offset: u64, label: u8 },
    #[error("non-zero padding at byte {offset}")]
    NonZeroPadding { offset: u64 },

    #[error("class {label} has {count} record(s); training needs at least 2")]
    ClassUnderpopulated { label: u8, count: usize },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("config parse error: {0}")]
    ParseError(String),
    #[error("unknown config key \"{0}\"")]
    UnknownKey(String),
    #[error("config value out of range: \"{0}\"")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("zero-norm vector under cosine similarity")]
    ZeroNormVector,
    #[error("no candidate row satisfies the retrieval filter")]
    NoCandidate,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty index")]
    EmptyIndex,
    #[error("AUROC needs both classes present")]
    SingleClass,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("missing text for record {0}; sparse retrieval needs a text sidecar")]
    MissingText(u64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            BadMagic { .. }
            | UnsupportedVersion { .. }
            | TruncatedFile { .. }
            | DimensionMismatch { .. }
            | NonZeroPadding { .. }
            | Io { .. } => ErrorClass::Io,
            NonFiniteGradient | NonFiniteLoss { .. } | ZeroNormVector => ErrorClass::Numerical,
            NonFiniteValue { .. }
            | DuplicateId { .. }
            | InvalidLabel { .. }
            | ClassUnderpopulated { .. }
            | InvariantViolation(_)
            | ParseError(_)
            | UnknownKey(_)
            | OutOfRange(_)
            | ShapeMismatch(_)
            | NoCandidate
            | EmptyCorpus
            | EmptyIndex
            | SingleClass
            | MissingText(_) => ErrorClass::Validation,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
