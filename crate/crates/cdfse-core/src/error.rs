use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose extents do not agree.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Input rejected by an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A model or training configuration field is out of contract.
    #[error("invalid configuration: field `{field}`: {detail}")]
    Config { field: &'static str, detail: String },

    /// API misuse (e.g. backward called twice on one tape).
    #[error("usage error: {0}")]
    Usage(String),

    /// A text or binary file does not match its documented format.
    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    /// I/O failure with the path that caused it.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_invalid_input(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
