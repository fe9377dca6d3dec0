use thiserror::Error;

pub type Result<T, E = CilError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CilError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cholesky decomposition failed at pivot {pivot} (value {value:e})")]
    DecompositionFailed { pivot: usize, value: f64 },

    #[error("insufficient data for task {task} class {class}: {count} sample(s), need at least 2")]
    InsufficientData { task: usize, class: u32, count: usize },

    #[error("degenerate covariance for task {task} class {class}: factorization failed after jitter escalation")]
    DegenerateCovariance { task: usize, class: u32 },

    #[error("duplicate class: task {task} class {class} is already stored")]
    DuplicateClass { task: usize, class: u32 },

    #[error("text embedding table has no entry for class {0}")]
    IncompleteTable(u32),

    #[error("training diverged ({stage}, task {task}, step {step}): {detail}")]
    TrainingDiverged { stage: &'static str, task: usize, step: usize, detail: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Divergence,
    Other,
}

impl CilError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            CilError::Config(_) => ErrorCategory::Config,
            CilError::UnsupportedFormat(_)
            | CilError::CorruptFile(_)
            | CilError::ContractViolation(_)
            | CilError::InsufficientData { .. }
            | CilError::IncompleteTable(_)
            | CilError::Io(_) => ErrorCategory::Data,
            CilError::TrainingDiverged { .. } => ErrorCategory::Divergence,
            _ => ErrorCategory::Other,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> CilError {
    CilError::InvalidArgument(msg.into())
}
