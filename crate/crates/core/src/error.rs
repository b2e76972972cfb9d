use thiserror::Error;

/// Errors surfaced by every layer of the library.
///
/// Each variant carries a stable machine-readable code (see [`Error::code`])
/// so front ends can dispatch on failures without parsing messages.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("unknown column index {index} (data has {available} columns)")]
    UnknownColumn { index: usize, available: usize },

    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: String, row: usize },

    #[error("invalid basis specification: {0}")]
    InvalidBasis(String),

    #[error("rank-deficient design: column '{column}' is linearly dependent on earlier columns")]
    RankDeficient { column: String },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("exponential overflow while evaluating moments at row {row}")]
    ExpOverflow { row: usize },

    #[error("singular matrix in {what}")]
    SingularMatrix { what: String },

    #[error("moment system is not identified: {0}")]
    Unidentified(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{failed} of {total} Monte Carlo replicates failed (more than 1% tolerated): {first}")]
    ReplicateFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("binary exposure supports only the robust propensity-score test; no robust-OR/DR extension exists")]
    BinaryUnsupported,
}

impl Error {
    /// Stable machine-readable code for this error.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnknownColumn { .. } => "E_UNKNOWN_COLUMN",
            Error::NonFinite { .. } => "E_NON_FINITE",
            Error::InvalidBasis(_) => "E_INVALID_BASIS",
            Error::RankDeficient { .. } => "E_RANK_DEFICIENT",
            Error::DimensionMismatch { .. } => "E_DIMENSION_MISMATCH",
            Error::InvalidData(_) => "E_INVALID_DATA",
            Error::ExpOverflow { .. } => "E_EXP_OVERFLOW",
            Error::SingularMatrix { .. } => "E_SINGULAR_MATRIX",
            Error::Unidentified(_) => "E_UNIDENTIFIED",
            Error::InvalidConfig(_) => "E_INVALID_CONFIG",
            Error::ReplicateFailures { .. } => "E_REPLICATE_FAILURES",
            Error::BinaryUnsupported => "E_BINARY_UNSUPPORTED",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
