use thiserror::Error;

use crate::engine::SimTime;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("event scheduled at {requested} but clock is already at {now}")]
    ScheduleInPast { requested: SimTime, now: SimTime },
    #[error("unknown event handle {0}")]
    UnknownHandle(u64),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ResourceError {
    #[error("transfer size must be positive")]
    EmptyTransfer,
    #[error("allocation size must be positive")]
    EmptyAllocation,
    #[error("unknown allocation {0}")]
    UnknownAllocation(u64),
    #[error("allocation {0} freed twice")]
    DoubleFree(u64),
    #[error("unknown channel {0}")]
    UnknownChannel(usize),
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("function `{function}`: field `{field}` must be non-negative (got {value})")]
    Negative {
        function: String,
        field: &'static str,
        value: f64,
    },
    #[error("function `{function}`: field `{field}` must be positive")]
    NotPositive {
        function: String,
        field: &'static str,
    },
    #[error("spec table parse error: {0}")]
    Parse(String),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
}

#[derive(Debug, Error)]
pub enum SharingError {
    #[error("release of `{function}` on gpu {gpu} while not active")]
    NotActive { function: String, gpu: usize },
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("trace line {line}: {message}")]
    Trace { line: u64, message: String },
    #[error("trace io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid generator: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("computation time must be positive")]
    NonPositiveCompute,
    #[error("percentile of an empty sample set")]
    EmptySamples,
    #[error("percentile rank {0} outside [0, 100]")]
    BadRank(f64),
}

/// Errors surfaced by a whole simulation run.
#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Manager(#[from] crate::sharing::ManagerError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}
