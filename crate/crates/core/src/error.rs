//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("non-finite value produced by {op} at iteration {iteration}")]
    NonFinite { op: &'static str, iteration: usize },

    #[error("empty dataset passed to {op}")]
    EmptyDataset { op: &'static str },

    #[error("feature width mismatch: model expects {expected}, input has {actual}")]
    WidthMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv column {name:?} declared in the schema is missing from the file")]
    MissingColumn { name: String },

    #[error("row {row}: value {value:?} is not a declared level of column {column:?}")]
    UnknownCategory { row: usize, column: String, value: String },

    #[error("row {row}: column {column:?} has non-numeric value {value:?}")]
    NonNumericValue { row: usize, column: String, value: String },

    #[error("paired sample too small: need at least 2 observations, got {n}")]
    SampleTooSmall { n: usize },

    #[error("paired sample length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degrees of freedom must be at least 1")]
    ZeroDegreesOfFreedom,

    #[error("inconsistent paired summary: sum of squares {dtilde} is smaller than n*dbar^2 = {ndbar2}")]
    InconsistentSummary { dtilde: f64, ndbar2: f64 },

    #[error("watermark embedding diverged at outer iteration {iteration}: {detail}")]
    EmbedDiverged { iteration: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
