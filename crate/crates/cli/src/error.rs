use tgtensor::TensorError;
use thiserror::Error;
use topoguide::CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("path error: {0}")]
    Path(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::Core(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Path(_) | Self::Data(_) => 2,
            Self::Core(e) => match e {
                CoreError::Invalid(_) | CoreError::UnknownScenario(_) => 1,
                CoreError::Singular { .. }
                | CoreError::NonFiniteGradient { .. }
                | CoreError::NonFiniteLoss(_)
                | CoreError::Tensor(TensorError::NonFinite(_)) => 3,
                _ => 2,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
