use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: matrix must be square, got {rows}x{cols}")]
    NonSquare {
        what: String,
        rows: usize,
        cols: usize,
    },

    #[error("{what}: dimension mismatch (expected {expected}, found {found})")]
    Dimension {
        what: String,
        expected: String,
        found: String,
    },

    #[error("{what}: non-finite entry")]
    NonFinite { what: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("eigenvalue iteration did not converge for {what} ({dim}x{dim})")]
    NoConvergence { what: String, dim: usize },

    #[error("{what}: asymmetry {asymmetry:.3e} exceeds tolerance {tol:.1e}")]
    Asymmetric {
        what: String,
        asymmetry: f64,
        tol: f64,
    },

    #[error("({what}) is not controllable; uncontrollable modes: {modes}")]
    Uncontrollable { what: String, modes: String },

    #[error("({what}) is not observable; unobservable modes: {modes}")]
    Unobservable { what: String, modes: String },

    #[error("assumption failed: {0}")]
    Assumption(String),

    #[error("{what}: residual {residual:.3e} above tolerance {tol:.3e} ({hint})")]
    Residual {
        what: String,
        residual: f64,
        tol: f64,
        hint: String,
    },

    #[error("closed-loop matrix is not Hurwitz (spectral abscissa {abscissa:.6})")]
    NotHurwitz { abscissa: f64 },

    #[error("infeasible: {context} (best violation {violation:.3e})")]
    Infeasible { context: String, violation: f64 },

    #[error("numerical breakdown in {0}")]
    NumericalBreakdown(String),

    #[error("config: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Infeasible,
    Assumption,
    Input,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Infeasible { .. } => ErrorClass::Infeasible,
            Error::Assumption(_) => ErrorClass::Assumption,
            Error::Config(_) | Error::Io { .. } | Error::Json { .. } | Error::Csv(_) => {
                ErrorClass::Input
            }
            _ => ErrorClass::Numerical,
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
