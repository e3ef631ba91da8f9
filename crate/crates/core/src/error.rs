use thiserror::Error;

/// Errors raised by the spectral, kernel and regression layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed spec string, invalid parameter, or violated precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// A manifold or action combination that has no closed-form spectrum here.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A point outside the manifold's coordinate chart.
    #[error("domain error: {0}")]
    Domain(String),

    /// Factorization failure, accuracy loss, or a broken numerical contract.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Enumeration or group size above the configured cap.
    #[error("resource limit: {what} would need {requested} entries (cap {cap})")]
    ResourceLimit {
        what: String,
        requested: u128,
        cap: usize,
    },

    /// Quotient dimension/volume not available in closed form for this action.
    #[error("unknown quotient: {0}")]
    UnknownQuotient(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code: 1 configuration, 2 numerical, 3 resource cap.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            Error::ResourceLimit { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
