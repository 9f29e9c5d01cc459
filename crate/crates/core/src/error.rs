use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("line {line}: timestamp {timestamp} does not increase over the previous row")]
    Ordering { line: usize, timestamp: u64 },

    #[error("no snapshots")]
    NoSnapshots,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("architecture error: {0}")]
    Architecture(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("model not calibrated: {0}")]
    NotCalibrated(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate solution: {0}")]
    Degenerate(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("fault intensity never reaches capacity {capacity} within {minutes} minutes after injection")]
    NoCrash { capacity: f64, minutes: u64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("incompatible artifacts: {0}")]
    Compatibility(String),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or inconsistent input data.
    Data,
    /// A numeric routine or a training loop failed.
    Numeric,
    /// Caller supplied invalid parameters.
    Usage,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Training { .. }
            | Error::Numeric(_)
            | Error::Degenerate(_)
            | Error::Architecture(_) => ErrorKind::Numeric,
            Error::Parameter(_) | Error::Precondition(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}
