use fewmark_autodiff::Error as TensorError;

/// Top-level error for data generation, training, evaluation, and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad flags, malformed config values, unknown names.
    #[error("usage: {0}")]
    Usage(String),

    /// Problems producing or consuming samples, episodes, or checkpoints.
    #[error("data: {0}")]
    Data(String),

    /// I/O wrapped with the path it concerned.
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Numerical failure inside tensor computation.
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Error {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Error {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code surfaced by the CLI: 1 usage, 2 data/checkpoint,
    /// 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Tensor(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
