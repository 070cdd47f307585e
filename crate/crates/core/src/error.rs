use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema: {0}")]
    Schema(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("non-binary treatment value `{value}` at row {row}")]
    NonBinaryTreatment { row: usize, value: String },
    #[error("missing value in column `{column}` at row {row}")]
    MissingValue { row: usize, column: String },
    #[error("cannot parse `{value}` in column `{column}` at row {row}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("need at least 2 units, got {0}")]
    TooFewUnits(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("empty arm: no units with A = {arm}")]
    EmptyArm { arm: u8 },
    #[error("fold {}: {source}", fold + 1)]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("rank-deficient design; offending columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("unit {unit} has leverage 1 (exact fit), HC3 undefined")]
    UnitLeverage { unit: usize },
    #[error("bootstrap: {0}")]
    Bootstrap(String),
    #[error("oracle certification failed: {0}")]
    Certification(String),
}

impl Error {
    pub(crate) fn in_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
