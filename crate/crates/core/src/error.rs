use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("causal graph has a cycle through node {node} ({name})")]
    CycleDetected { node: usize, name: String },

    #[error("node index {index} out of range for a model with {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("design matrix is rank deficient and ridge fallback is disabled")]
    SingularDesign,

    #[error("no counterfactual reaches class {target}: {reason}")]
    Infeasible { target: usize, reason: String },

    #[error("no grid point satisfies the class constraint")]
    EmptyFeasibleSet,

    #[error("subset enumeration over {n_mutable} mutable features exceeds the budget of {max}")]
    SubsetBudgetExceeded { n_mutable: usize, max: usize },

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("malformed row {index}: {reason}")]
    MalformedRow { index: usize, reason: String },

    #[error("unknown category {0:?}")]
    UnknownCategory(String),

    #[error("column {0} is constant")]
    ConstantColumn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}
