use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants follow the failure classes of the library contract: bad
/// arguments, misuse of stateful objects, numerical breakdown, and violated
/// mathematical preconditions.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("numeric divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// True for the failure classes that indicate the numbers blew up rather
    /// than a caller mistake.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Divergence { .. })
    }
}
