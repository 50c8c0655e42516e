use thiserror::Error;

/// Errors raised by the simulator, the kernels, and the distributed algorithms.
#[derive(Debug, Error)]
pub enum Error {
    #[error("a machine needs at least one processor")]
    NoProcessors,

    #[error("processor {proc} out of range for a machine of {procs} processors")]
    ProcOutOfRange { proc: usize, procs: usize },

    #[error("processor {0} cannot send a message to itself")]
    SelfSend(usize),

    #[error("processor {proc} {role} more than one message in a single round")]
    PortConflict { proc: usize, role: &'static str },

    #[error("unmatched message: {0}")]
    UnmatchedMessage(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular triangular matrix: zero diagonal entry at {0}")]
    SingularTriangular(usize),

    #[error("grid hypothesis violated: {0}")]
    GridHypothesis(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
