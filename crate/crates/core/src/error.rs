use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse failure at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite entry at row {row}, column {column}")]
    NonFinite { row: usize, column: String },

    #[error("n ≤ J: {n} observations for {j} instruments")]
    TooFewObservations { n: usize, j: usize },

    #[error("no variants")]
    NoVariants,

    #[error("nonpositive variance at row {row}: sigma2_omega = {value}")]
    NonPositiveVariance { row: usize, value: f64 },

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: String,
        reason: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rank deficiency: eigenvalue {eigenvalue:e} below {threshold:e}")]
    RankDeficient { eigenvalue: f64, threshold: f64 },

    #[error("fitted exposure has zero norm")]
    ZeroExposure,

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter { .. } | Error::Config(_) => ErrorClass::Usage,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Dimension(_)
            | Error::NonFinite { .. }
            | Error::TooFewObservations { .. }
            | Error::NoVariants
            | Error::NonPositiveVariance { .. } => ErrorClass::Data,
            Error::RankDeficient { .. } | Error::ZeroExposure | Error::NotPositiveDefinite(_) => {
                ErrorClass::Numerical
            }
        }
    }

    pub(crate) fn param(name: &'static str, value: impl ToString, reason: &'static str) -> Self {
        Error::InvalidParameter {
            name,
            value: value.to_string(),
            reason,
        }
    }
}
