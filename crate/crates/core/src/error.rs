use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: incompatible shapes {detail}")]
    ShapeMismatch {
        primitive: &'static str,
        detail: String,
    },

    #[error("{primitive}: fully masked slice (an empty sequence reached a masked reduction)")]
    FullyMaskedSlice { primitive: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{primitive}: produced a non-finite value")]
    NonFinite { primitive: &'static str },

    #[error("invalid tensor: shape {shape:?} does not hold {len} elements")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("index out of range: {what} {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("label {label} out of range for {candidates} candidates in {context}")]
    LabelOutOfRange {
        label: usize,
        candidates: usize,
        context: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parameter mismatch for '{name}': expected shape {expected:?}, found {found:?}")]
    ParamMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("training diverged at step {step}: non-finite {what}")]
    Divergence { step: u64, what: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse category used by callers that map failures to process exit codes.
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Config(_) => ErrorCategory::Usage,
            NonFinite { .. } | Divergence { .. } | NonScalarLoss { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl ErrorCategory {
    /// Process exit code convention: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numeric => 3,
        }
    }
}
