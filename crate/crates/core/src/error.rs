use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KpopError>;

#[derive(Debug, Error)]
pub enum KpopError {
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

    #[error("role column absent: {0}")]
    RoleColumnAbsent(String),

    #[error("sample flag not binary at data row {row}: {value:?}")]
    SampleFlagNotBinary { row: usize, value: String },

    #[error("non-positive base weight at data row {row}: {value}")]
    NonPositiveBaseWeight { row: usize, value: f64 },

    #[error("negative population weight at data row {row}: {value}")]
    NegativePopulationWeight { row: usize, value: f64 },

    #[error("unparseable number in column {column} at data row {row}: {value:?}")]
    BadNumber {
        column: String,
        row: usize,
        value: String,
    },

    #[error("need at least 2 {which} rows, found {found}")]
    TooFewRows { which: &'static str, found: usize },

    #[error("variable not found: {0}")]
    UnknownVariable(String),

    #[error("variable is not categorical: {0}")]
    NotCategorical(String),

    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),

    #[error("bandwidth undefined: no pairwise variation")]
    DegenerateHistogram,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("kernel matrix is identically zero")]
    ZeroMatrix,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no stratum overlap between sample and population")]
    NoStratumOverlap,

    #[error("invalid kernel cache file: {0}")]
    BadKernelCache(String),

    #[error("invalid data-generating process: {0}")]
    InvalidDgp(String),

    #[error("no units sampled after {0} attempts")]
    EmptyDraw(usize),
}

impl KpopError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KpopError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used on the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            KpopError::Io { .. } => "io",
            KpopError::Csv(_) => "csv",
            KpopError::Json(_) => "json",
            KpopError::RoleColumnAbsent(_) => "role_column_absent",
            KpopError::SampleFlagNotBinary { .. } => "sample_flag_not_binary",
            KpopError::NonPositiveBaseWeight { .. } => "non_positive_base_weight",
            KpopError::NegativePopulationWeight { .. } => "negative_population_weight",
            KpopError::BadNumber { .. } => "bad_number",
            KpopError::TooFewRows { .. } => "too_few_rows",
            KpopError::UnknownVariable(_) => "unknown_variable",
            KpopError::NotCategorical(_) => "not_categorical",
            KpopError::InvalidBandwidth(_) => "invalid_bandwidth",
            KpopError::DegenerateHistogram => "degenerate_histogram",
            KpopError::NonFinite(_) => "non_finite",
            KpopError::ZeroMatrix => "zero_matrix",
            KpopError::DimensionMismatch(_) => "dimension_mismatch",
            KpopError::InvalidConfig(_) => "invalid_config",
            KpopError::NoStratumOverlap => "no_stratum_overlap",
            KpopError::BadKernelCache(_) => "bad_kernel_cache",
            KpopError::InvalidDgp(_) => "invalid_dgp",
            KpopError::EmptyDraw(_) => "empty_draw",
        }
    }
}
