use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Each variant maps onto one of the stable process exit codes used by the
/// command line front end (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("label-space error: {0}")]
    LabelSpace(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 usage, 2 data/format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
