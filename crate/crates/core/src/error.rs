use thiserror::Error;

pub type Result<T> = std::result::Result<T, CalibError>;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {label} out of range for {n} classes")]
    ClassOutOfRange { label: usize, n: usize },

    #[error("incomplete class coverage at context size {context_size}: missing classes {missing:?}")]
    Coverage {
        context_size: usize,
        missing: Vec<usize>,
    },

    #[error("unsupported task: {0}")]
    UnsupportedTask(String),

    #[error("non-finite objective at every restart")]
    Numeric,

    #[error("transport error: {0}")]
    Transport(String),

    #[error("backend protocol error: {0}")]
    Protocol(String),

    #[error("inference failed for query {query} under context {context}: {source}")]
    Inference {
        query: String,
        context: String,
        #[source]
        source: Box<CalibError>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CalibError {
    pub(crate) fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        CalibError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
