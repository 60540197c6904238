//! Shared error type for panel ingestion, fitting, and weight solving.

use thiserror::Error;

/// Errors surfaced by the library. Infeasibility of a balance program is a
/// recoverable signal (the tuning search consumes it); everything else is a
/// contract violation on the inputs or a numerical breakdown.
#[derive(Debug, Error)]
pub enum DcbError {
    #[error("missing cell: unit {unit} has {found} of {expected} periods")]
    MissingCell {
        unit: String,
        found: usize,
        expected: usize,
    },

    #[error("non-binary treatment value {value} for unit {unit} at period {period}")]
    NonBinaryTreatment {
        unit: String,
        period: usize,
        value: String,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("period {t} out of range 1..={t_max}")]
    PeriodOutOfRange { t: usize, t_max: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("{n} rows is too few for {k} folds")]
    TooFewRows { n: usize, k: usize },

    #[error("empty stratum: no unit matches treatment prefix {prefix}")]
    EmptyStratum { prefix: String },

    #[error("perfect separation detected in logistic fit")]
    SeparationDetected,

    #[error("balance program infeasible at period {period} (worst gap {worst_gap:.3e} vs bound {bound:.3e})")]
    Infeasible {
        period: usize,
        worst_gap: f64,
        bound: f64,
    },

    #[error("no feasible point in tuning grid at period {period}; least infeasible gap {worst_gap:.3e} vs bound {bound:.3e}")]
    NoFeasiblePoint {
        period: usize,
        worst_gap: f64,
        bound: f64,
    },

    #[error("zero denominator: no on-path unit carries weight")]
    ZeroDenominator,

    #[error("numerical failure in {what}")]
    NumericalFailure { what: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DcbError>;
