use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by any stage of the pipeline.
#[derive(Error, Debug)]
pub enum IrweError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed line {line} in {path}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("node index {index} out of range (graph has {num_nodes} nodes)")]
    NodeOutOfRange { index: usize, num_nodes: usize },

    #[error("node {0} has no outgoing edges")]
    IsolatedNode(String),

    #[error("walk length {0} outside supported range [1, {1}]")]
    WalkLengthOutOfRange(usize, usize),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("NaN encountered in tensor `{0}`")]
    NonFinite(String),

    #[error("corrupted or incompatible file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, IrweError>;

impl IrweError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IrweError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for user errors, 3 for internal ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            IrweError::Io { .. }
            | IrweError::Malformed { .. }
            | IrweError::Config(_)
            | IrweError::Format { .. }
            | IrweError::IsolatedNode(_)
            | IrweError::Invalid(_) => 2,
            _ => 3,
        }
    }
}
