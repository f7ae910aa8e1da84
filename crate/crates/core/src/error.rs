use std::fmt;

/// Errors raised by the engine, the spectral tools and the search pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("degenerate operator: {0}")]
    Degenerate(String),
    #[error("matrix too large: {rows}x{cols} exceeds the cap of {cap} entries")]
    Size { rows: usize, cols: usize, cap: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error in {source_name} at byte {offset}: {message}")]
    Format {
        source_name: String,
        offset: u64,
        message: String,
    },
    #[error("derivation failed: {0}")]
    Derivation(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag for machine-parsable failure reports.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Dimension(_) => ErrorCategory::Dimension,
            Error::State(_) => ErrorCategory::State,
            Error::Degenerate(_) => ErrorCategory::Degenerate,
            Error::Size { .. } => ErrorCategory::Size,
            Error::Argument(_) => ErrorCategory::Argument,
            Error::Format { .. } => ErrorCategory::Format,
            Error::Derivation(_) => ErrorCategory::Derivation,
            Error::NonFinite(_) => ErrorCategory::NonFinite,
            Error::Io(_) => ErrorCategory::Io,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn format(source_name: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            source_name: source_name.into(),
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Dimension,
    State,
    Degenerate,
    Size,
    Argument,
    Format,
    Derivation,
    NonFinite,
    Io,
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCategory::Dimension => "dimension",
            ErrorCategory::State => "state",
            ErrorCategory::Degenerate => "degenerate",
            ErrorCategory::Size => "size",
            ErrorCategory::Argument => "argument",
            ErrorCategory::Format => "format",
            ErrorCategory::Derivation => "derivation",
            ErrorCategory::NonFinite => "non-finite",
            ErrorCategory::Io => "io",
        };
        f.write_str(s)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
