use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },

    #[error("invalid {field} at line {line}: {detail}")]
    InvariantAt {
        line: usize,
        field: String,
        detail: String,
    },

    #[error("invalid {field}: {detail}")]
    Invariant { field: String, detail: String },

    #[error("empty {0} dataset")]
    EmptyDataset(&'static str),

    #[error("no jointly valid steps between trajectories")]
    NoJointlyValidSteps,

    #[error("cluster count {k} exceeds population {n}")]
    ClusterCountExceedsPopulation { k: usize, n: usize },

    #[error("not enough {kind} trajectories: have {have}, need {need}")]
    InsufficientExamples {
        kind: &'static str,
        have: usize,
        need: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Config(String),

    #[error("sensitivity ratio undefined: {0}")]
    UndefinedRatio(String),
}

impl Error {
    pub fn invariant(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
