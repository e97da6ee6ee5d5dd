use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed cell {value:?} at row {row}, column {column:?}")]
    MalformedCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("column {0:?} not found")]
    MissingColumn(String),

    #[error("response value {value:?} at row {row} is not 0 or 1")]
    InvalidResponse { row: usize, value: String },

    #[error("missing value at row {row}, column {column:?}")]
    MissingCell { row: usize, column: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot stratify: class {class} has {count} member(s), at least 2 required")]
    CannotStratify { class: u8, count: usize },

    #[error("response has a single class")]
    SingleClass,

    #[error("linear predictor {eta} lies outside the link support")]
    OutsideSupport { eta: f64 },

    #[error("need at least {needed} distinct non-missing values, found {found}")]
    TooFewDistinct { needed: usize, found: usize },

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("P-IRLS did not converge after {iterations} iterations (deviance {deviance}, last relative change {last_change:e})")]
    NotConverged {
        iterations: usize,
        deviance: f64,
        last_change: f64,
    },

    #[error("operation requires a converged fit")]
    NotConvergedModel,

    #[error("no grid point produced a converged fit")]
    NoGridPointConverged,

    #[error("unknown term {0:?}")]
    UnknownTerm(String),

    #[error("models do not share the same specification")]
    SpecMismatch,

    #[error("no defaults present")]
    NoDefaults,

    #[error("feature {0:?} is entirely missing")]
    EntirelyMissing(String),
}

pub type Result<T> = std::result::Result<T, Error>;
