//! Crate-wide error type. Contract violations are reported as typed variants
//! so callers (and the CLI exit-code mapping) can tell configuration mistakes
//! apart from scenario failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A label, class name, or template violated the task schema.
    #[error("schema violation: {0}")]
    SchemaViolation(String),

    /// A statistic was requested on data for which it is undefined.
    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    /// A partition request cannot be satisfied by the dataset.
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    /// Parameter or feature dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An aggregation or training step had nothing to work on.
    #[error("no progress possible: {0}")]
    NoProgress(String),

    /// A frozen backend was asked to fit on data tagged private.
    #[error("refusing to fit on private data: {0}")]
    PrivateDataInFit(String),

    /// A backend was asked to score a class it was never fit on.
    #[error("unknown class for backend: {0}")]
    UnknownClass(String),

    /// Calibration cannot be built from the estimated distribution.
    #[error("degenerate calibration estimate: {0}")]
    DegenerateCalibration(String),

    /// Label grouping parameters are unusable.
    #[error("bad label grouping: {0}")]
    BadGrouping(String),

    /// A demonstration policy is missing a required resource.
    #[error("demonstration policy unsatisfiable: {0}")]
    PolicyUnsatisfiable(String),

    /// Raw private examples may never be shipped out of a silo. The ledger
    /// refuses to construct such an event.
    #[error("raw data egress from silo {0} is not expressible")]
    RawDataEgress(String),

    /// Configuration file problem; `path` names the offending key.
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl Error {
    /// True when the error stems from a malformed or inconsistent run
    /// configuration rather than from executing a scenario.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
