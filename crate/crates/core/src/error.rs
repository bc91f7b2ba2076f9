use thiserror::Error;

/// Errors surfaced by the modeling, history, and control layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}: component {index} = {value}")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f64,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unsupported dictionary degree {0} (only 1 and 2 are validated)")]
    UnsupportedDegree(usize),

    #[error("rank-deficient Gram matrix: {deficiency} deficient dimensions (set lambda_reg > 0)")]
    RankDeficient { deficiency: usize },

    #[error("history database has {available} entries but {requested} neighbors were requested")]
    NotEnoughNeighbors { available: usize, requested: usize },

    #[error("identified model is unstable over the horizon: A^{power} is non-finite; reduce the prediction horizon")]
    UnstableHorizon { power: usize },

    #[error("QP is infeasible")]
    QpInfeasible,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("batch rejected: {0}")]
    BatchRejected(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
