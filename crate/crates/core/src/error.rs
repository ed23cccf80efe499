use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A loss, residual or gradient evaluated to NaN or infinity.
    #[error("non-finite {what}{}", trajectory.map(|id| format!(" (trajectory {id})")).unwrap_or_default())]
    NonFinite { what: String, trajectory: Option<u64> },

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("state space too large to enumerate: more than {limit} reachable states")]
    StateLimit { limit: usize },

    #[error("malformed policy file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn non_finite(what: impl Into<String>, trajectory: Option<u64>) -> Self {
        Error::NonFinite {
            what: what.into(),
            trajectory,
        }
    }
}
