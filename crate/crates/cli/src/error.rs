//! Failures reported by the command-line front end.

use msr_core::{Error, ErrorCategory};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{source_name}{}: {message}", span.map(|s| format!(" at byte {s}")).unwrap_or_default())]
    Config {
        source_name: String,
        message: String,
        span: Option<usize>,
    },
    #[error("{0}")]
    Argument(String),
    #[error("{0}")]
    Lock(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    /// Stable tag printed as `error[<category>]`.
    pub fn category(&self) -> String {
        match self {
            CliError::Core(e) => e.category().to_string(),
            CliError::Config { .. } => "config".into(),
            CliError::Argument(_) => ErrorCategory::Argument.to_string(),
            CliError::Lock(_) => "lock".into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.category() {
                ErrorCategory::Argument => 2,
                ErrorCategory::Format => 3,
                ErrorCategory::Io => 4,
                ErrorCategory::State => 5,
                ErrorCategory::NonFinite => 6,
                ErrorCategory::Derivation => 7,
                ErrorCategory::Dimension => 8,
                ErrorCategory::Degenerate => 9,
                ErrorCategory::Size => 10,
            },
            CliError::Argument(_) => 2,
            CliError::Config { .. } => 11,
            CliError::Lock(_) => 12,
        }
    }

    /// One line: `error[category]: message`.
    pub fn report(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error[{}]: {msg}", self.category())
    }
}

pub type CliResult<T> = Result<T, CliError>;
