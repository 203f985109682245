use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] susep::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 = configuration, 3 = I/O or file format, 4 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        use susep::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::Json { .. } => 2,
                E::Io { .. } | E::Format { .. } => 3,
                E::Solver { .. }
                | E::NonFinite { .. }
                | E::UndefinedMetric(_)
                | E::Placement(_) => 4,
            },
        }
    }
}
