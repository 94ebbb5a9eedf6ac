use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite state produced at timestep {timestep}")]
    NonFiniteState { timestep: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("constraint provider failed at row {row}: {message}")]
    ConstraintProvider { row: usize, message: String },

    #[error("non-finite gradient for particle {particle}")]
    NonFiniteGradient { particle: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular kernel matrix: {0}")]
    SingularKernel(String),

    #[error("environment step failed at step {step}: {message}")]
    EnvStep { step: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
