use thiserror::Error;

/// Errors produced by grid construction, kernel assembly, layer application,
/// training, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("degenerate assembly at output row {row}: {reason}")]
    AssemblyDegenerate { row: usize, reason: String },

    #[error("degenerate neighborhood at point {index}: {reason}")]
    DegenerateNeighborhood { index: usize, reason: String },

    #[error("kernel is not translation invariant: rows {row_a} and {row_b} differ by {max_diff:e}")]
    NotEquivariant {
        row_a: usize,
        row_b: usize,
        max_diff: f64,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate target: norm is zero")]
    DegenerateTarget,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("incompatible dataset: {0}")]
    IncompatibleDataset(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
