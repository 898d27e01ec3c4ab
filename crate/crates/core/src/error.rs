use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument is outside the domain of the operation (negative time
    /// step, non-finite sensitivity, negative total insulin, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration can never work (singular target system, zero
    /// disturbance divisor, inconsistent dimensions).
    #[error("configuration error: {0}")]
    Config(String),

    /// A factorization or iterative solve broke down.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("closed loop aborted at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}
