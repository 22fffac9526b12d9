use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NmmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NmmError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("id out of range at line {line}")]
    IdOutOfRange { line: usize },

    #[error("self-loop at line {line}; self-inclusion is implicit")]
    SelfLoop { line: usize },

    #[error("node {node} out of range (graph has {num_nodes} nodes)")]
    NodeOutOfRange { node: usize, num_nodes: usize },

    #[error("duplicate node {0} in node set")]
    DuplicateNode(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("node {node} cannot choose {choice}: not in its neighborhood")]
    NotANeighbor { node: usize, choice: usize },

    #[error("enumeration budget exceeded: {configs:.3e} configurations (limit {limit:.3e}); use the variational path")]
    BudgetExceeded { configs: f64, limit: f64 },

    #[error("degenerate attention at node {0}: every feasible neighbor has zero weight")]
    DegenerateAttention(usize),

    #[error("non-finite value at tape record {index} ({op})")]
    NonFinite { index: usize, op: &'static str },

    #[error("training diverged at epoch {epoch}: elbo = {elbo}")]
    Diverged { epoch: usize, elbo: f64 },

    #[error("graph fingerprint mismatch: model expects {expected}, graph has {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("{0}")]
    Format(String),
}

impl NmmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NmmError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for NmmError {
    fn from(e: serde_json::Error) -> Self {
        NmmError::Format(e.to_string())
    }
}
