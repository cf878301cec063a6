use thiserror::Error;

/// Errors produced by the training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate basis: vector {index} is linearly dependent on its predecessors")]
    DegenerateBasis { index: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("labeling rule error: {0}")]
    LabelingRule(String),

    #[error("imbalance spec error: {0}")]
    ImbalanceSpec(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("class {class_id} has {size} instances, need at least {required}")]
    InsufficientClassSize {
        class_id: usize,
        size: usize,
        required: usize,
    },

    #[error("subspace capacity exceeded: p={p} x l={labels} > d={dim}")]
    Capacity { p: usize, labels: usize, dim: usize },

    #[error("degenerate subtask: {0}")]
    DegenerateSubtask(String),

    #[error("training diverged in {phase}: {message}")]
    Training { phase: String, message: String },

    #[error("run {run} failed: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }
}
