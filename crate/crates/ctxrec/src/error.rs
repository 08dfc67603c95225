use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the process exit codes used by the `ctxrec` binary:
/// configuration problems exit 2, data problems exit 3, numeric problems
/// exit 4 (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths of operands do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An input is degenerate for the requested operation (e.g. a
    /// zero-norm vector fed to a cosine similarity).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An entity id fell outside the vocabulary under a strict policy.
    #[error("unknown entity: {0}")]
    UnknownEntity(String),

    /// A configuration value is missing or invalid.
    #[error("config error: {0}")]
    Config(String),

    /// The input data violates a contract of the pipeline.
    #[error("data error: {0}")]
    Data(String),

    /// Negative sampling could not satisfy the request.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A metric was invoked on inputs it is undefined for.
    #[error("metric error: {0}")]
    Metric(String),

    /// Underlying I/O failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 = config, 3 = data, 4 = numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::Metric(_) => 2,
            Error::Data(_) | Error::Sampling(_) | Error::UnknownEntity(_) | Error::Io(_) => 3,
            Error::Numeric(_) | Error::Degenerate(_) => 4,
        }
    }

    /// Short machine-parsable kind tag used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::Metric(_) => "config",
            Error::Data(_) | Error::Sampling(_) | Error::UnknownEntity(_) | Error::Io(_) => "data",
            Error::Numeric(_) | Error::Degenerate(_) => "numeric",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
