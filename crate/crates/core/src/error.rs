use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("index {index} out of range for {len} subjects")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate null distribution: all eigenvalues are zero")]
    DegenerateDistribution,

    #[error("degenerate sample split at {split} for T = {n_times}")]
    DegenerateSplit { split: usize, n_times: usize },

    #[error("no subjects classified as having a break; nothing to cluster")]
    NothingToCluster,

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("conditional metric undefined: {0}")]
    ConditionalMetricUndefined(String),

    #[error("incomplete panel, missing cells (first {shown} of {total}): {cells}")]
    Incomplete {
        total: usize,
        shown: usize,
        cells: String,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("non-positive price {value} at time {time}, grid point {grid_index}")]
    Domain {
        time: usize,
        grid_index: usize,
        value: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape { .. } => "shape",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateDistribution => "degenerate_distribution",
            Error::DegenerateSplit { .. } => "degenerate_split",
            Error::NothingToCluster => "nothing_to_cluster",
            Error::Calibration(_) => "calibration",
            Error::ConditionalMetricUndefined(_) => "conditional_metric_undefined",
            Error::Incomplete { .. } => "incomplete",
            Error::Parse { .. } => "parse",
            Error::Domain { .. } => "domain",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
