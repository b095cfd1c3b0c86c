use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty input file")]
    EmptyFile,
    #[error("missing `loss` column")]
    MissingLossColumn,
    #[error("no attribute columns (expected z0..z{{d-1}})")]
    NoAttributeColumns,
    #[error("unexpected column `{0}` (expected loss, z0..z{{d-1}}, optional mu_hat)")]
    UnexpectedColumn(String),
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("attribute columns are not contiguous: found z{found} but z{missing} is absent")]
    AttributeGap { found: usize, missing: usize },
    #[error("non-numeric value {value:?} at row {row}, column `{column}`")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("non-finite value at row {row}, column `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("negative loss at row {row}")]
    NegativeLoss { row: usize },
    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("malformed CSV at row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fold count K={k} must satisfy 2 <= K <= n (n={n})")]
    InvalidFoldCount { k: usize, n: usize },
    #[error("need n >= 2K samples for cross-fitting (n={n}, K={k})")]
    TooFewSamples { n: usize, k: usize },
    #[error("k_neighbors={k} exceeds auxiliary sample size {n}")]
    TooManyNeighbors { k: usize, n: usize },
    #[error("attribute dimension mismatch: model expects {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("external model has no prediction for row {index} (aligned length {len})")]
    ExternalIndexOutOfRange { index: usize, len: usize },
    #[error("external model can only be queried by row index")]
    ExternalNeedsIndex,
    #[error("learner=external requires a `mu_hat` column")]
    MissingExternalMu,
}

impl Error {
    /// Errors caused by bad user input (as opposed to I/O or runtime failures).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
