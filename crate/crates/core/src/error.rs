use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("reference range is empty: ref_low={low} must be below ref_high={high}")]
    InvalidReferenceRange { low: f64, high: f64 },

    #[error("line {line}: {message}")]
    Record { line: u64, message: String },

    #[error("imputation precondition failed for column {column}: {observed} observed values, {required} required")]
    ImputePrecondition {
        column: usize,
        observed: usize,
        required: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("no valid results for {age_group} / {algorithm}; widen the hyperparameter grid")]
    NoValidResults { age_group: String, algorithm: String },

    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("cohort is empty: no patient satisfies the selection rule")]
    EmptyCohort,

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category, used for exit codes and error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "missing_file",
            Error::Config(_) | Error::InvalidParameter(_) | Error::InvalidSpec(_) => "invalid_config",
            Error::Record { .. } | Error::Csv(_) | Error::Json(_) | Error::InvalidReferenceRange { .. } => {
                "malformed_input"
            }
            Error::EmptyCohort => "empty_cohort",
            Error::NoValidResults { .. } => "no_valid_results",
            Error::ImputePrecondition { .. } | Error::LengthMismatch { .. } => "internal",
            Error::Io(_) => "io",
        }
    }
}
