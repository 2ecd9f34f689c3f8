//! Crate-wide error type.
//!
//! Errors split into two classes that the CLI maps onto exit codes:
//! validation problems (bad shapes, bad config, unresolvable literals,
//! malformed files) and runtime problems (I/O, numeric breakdown).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix shape disagreement.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid configuration value (batch size 0, τ ≤ 0, …).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed input data; `row` is 1-based including the header line.
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    /// Value not present in (or incompatible with) a column dictionary.
    #[error("dictionary error: {0}")]
    Dictionary(String),

    /// Query references a column the schema does not have.
    #[error("unknown column: {0}")]
    UnknownColumn(String),

    /// A categorical distribution with no admissible outcome (all −∞ row).
    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    /// Exhaustive enumeration asked for a region above the configured cap.
    #[error("region of size {size} exceeds enumeration cap {cap}")]
    RegionTooLarge { size: u128, cap: u128 },

    /// Corrupt or foreign binary artifact (bad magic, truncated block, …).
    #[error("format error: {0}")]
    Format(String),

    /// Numeric failure at runtime (NaN loss, divergence).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors the CLI reports as validation failures (exit code 2);
    /// the rest are runtime failures (exit code 3).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Numeric(_))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let msg = e.to_string();
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => Error::Parse { row: 0, msg },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
