use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const CHECK_FAILED: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    BadFile { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] clusterseg_core::Error),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
            _ => exit::DATA,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn bad_file(path: &Path, message: impl ToString) -> Self {
        CliError::BadFile {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn usage(e: impl ToString) -> Self {
        CliError::Usage(e.to_string())
    }
}

macro_rules! core_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

core_error!(
    clusterseg_core::scenegen::SceneError,
    clusterseg_core::annotation::AnnotationError,
    clusterseg_core::clustering::ClusteringError,
    clusterseg_core::losses::LossError,
    clusterseg_core::predictor::PredictorError,
    clusterseg_core::eval::EvalError,
    clusterseg_core::dataio::DataError,
    clusterseg_core::training::TrainError
);
