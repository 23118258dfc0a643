use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate neighborhood at point {index}: {neighbors} neighbors within radius")]
    DegenerateNeighborhood { index: usize, neighbors: usize },

    #[error("degenerate patch at point {index}: {neighbors} neighbors within support radius")]
    DegeneratePatch { index: usize, neighbors: usize },

    #[error("cloud has no normals")]
    MissingNormals,

    #[error("external descriptor `{id}` has no row for keypoint {index}")]
    MissingExternalRow { id: String, index: usize },

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("rank error: requested {requested} components but covariance rank is {rank}")]
    Rank { requested: usize, rank: usize },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("empty triplet batch: {0}")]
    EmptyBatch(String),

    #[error("undefined recall: no keypoint has a ground-truth correspondent")]
    UndefinedRecall,

    #[error("undefined distance: every descriptor pair has zero norm")]
    UndefinedDistance,

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse error classes, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Shape(_) => ErrorClass::Config,
            Error::NumericOverflow(_) | Error::Rank { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
