use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Adaptive quadrature gave up before reaching its tolerance.
    #[error("quadrature did not converge: value {value:e}, error estimate {error:e}")]
    Quadrature { value: f64, error: f64 },

    /// A non-finite or otherwise unusable numerical result.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("chain {chain} failed: {source}")]
    Chain {
        chain: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported target: {0}")]
    UnsupportedTarget(String),

    /// Malformed input data; `row` is 1-based and counts the header as row 1.
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Quadrature { .. } => "quadrature",
            Error::Numerical(_) => "numerical",
            Error::Initialization(_) => "initialization",
            Error::Chain { source, .. } => source.code(),
            Error::Degenerate(_) => "degenerate",
            Error::UnsupportedTarget(_) => "unsupported_target",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    /// Broad category used to pick a process exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::UnsupportedTarget(_) => ErrorCategory::Config,
            Error::Parse { .. } | Error::Io(_) | Error::Domain(_) | Error::Degenerate(_) => {
                ErrorCategory::Data
            }
            Error::Quadrature { .. } | Error::Numerical(_) | Error::Initialization(_) => {
                ErrorCategory::Numerical
            }
            Error::Chain { source, .. } => source.category(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numerical => 4,
        }
    }
}
