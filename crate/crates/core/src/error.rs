use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("unknown relation id {0}")]
    UnknownRelation(usize),

    #[error("attribute `{0}` has a degenerate range (max == min or no training values)")]
    DegenerateAttribute(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("curvature mismatch: {0} vs {1}")]
    Curvature(f64, f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("exhaustive enumeration exceeded the guard of {0} paths")]
    EnumerationGuard(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown ablation toggle `{0}`")]
    UnknownToggle(String),

    #[error("training fault: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
