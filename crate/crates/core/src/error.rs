use tgtensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("singular stiffness matrix (pivot at dof {dof}); supports do not remove rigid-body motion")]
    Singular { dof: usize },
    #[error("unknown boundary-condition scenario {0}")]
    UnknownScenario(usize),
    #[error("no void region can host a detached blob")]
    NoSpace,
    #[error("topology has no material")]
    EmptyTopology,
    #[error("expected a single connected component, found {0}")]
    NotSingleComponent(usize),
    #[error("paired samples differ: {0}")]
    MismatchedPairing(String),
    #[error("no records to aggregate")]
    EmptyRecords,
    #[error("all dataset sources are empty")]
    EmptySources,
    #[error("non-finite {what} gradient at t = {t}")]
    NonFiniteGradient { what: &'static str, t: usize },
    #[error("non-finite training loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
