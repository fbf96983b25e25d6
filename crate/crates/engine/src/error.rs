use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Core(#[from] kipa_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("NIfTI parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported NIfTI datatype code {0} (supported: 2, 4, 8, 16, 64)")]
    UnsupportedDatatype(i16),
    #[error("expected a 3D volume, header has dim[0] = {0}")]
    Dimensionality(i16),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("predictor protocol: {0}")]
    Protocol(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

impl EngineError {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(io::Error) -> EngineError {
        let path = path.as_ref().to_path_buf();
        move |source| EngineError::Io { path, source }
    }

    pub fn config(key: impl Into<String>, message: impl std::fmt::Display) -> Self {
        EngineError::Config {
            key: key.into(),
            message: message.to_string(),
        }
    }
}
