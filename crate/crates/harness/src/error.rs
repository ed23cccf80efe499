use std::path::PathBuf;

use thiserror::Error;

use crate::validate::Diagnostic;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("malformed override `{0}`: expected dotted.path=value")]
    MalformedOverride(String),

    #[error("invalid configuration:\n{}", render(.0))]
    Invalid(Vec<Diagnostic>),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    /// One or more runs stopped on a non-finite loss.
    #[error("{count} run(s) aborted on non-finite values")]
    NumericAbort { count: usize },

    #[error(transparent)]
    Core(#[from] valuelab::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// 2 for numeric aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::NumericAbort { .. } => 2,
            HarnessError::Core(valuelab::Error::NonFinite { .. }) => 2,
            _ => 1,
        }
    }

    pub fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        HarnessError::File {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

fn render(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}
