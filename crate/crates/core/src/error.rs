//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for all operations in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Invalid configuration (geometry residues, bad windows, malformed specs).
    #[error("config error: {0}")]
    Config(String),

    /// A numeric breakdown: NaN/Inf appeared where a finite value is required.
    #[error("numeric error: {context} (index {index})")]
    Numeric { context: String, index: usize },

    /// A weight row collapsed below the projectable norm floor.
    #[error("degenerate row {row}: norm {norm:e} below 1e-30")]
    DegenerateRow { row: usize, norm: f64 },

    /// An error raised while processing a specific receptive field.
    #[error("field ({row}, {col}): {source}")]
    Field {
        row: usize,
        col: usize,
        source: Box<Error>,
    },

    /// Problems with dataset contents (bad magic, truncated payload, empty input).
    #[error("data error: {0}")]
    Data(String),

    /// Worker-partition request that cannot be satisfied.
    #[error("partition error: {0}")]
    Partition(String),

    /// The data source ran out before the pipeline could make progress.
    #[error("data underrun: {0}")]
    Underrun(String),

    /// A checkpoint failed its content-hash or config-echo verification.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code class for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Config(_) | Error::Partition(_) => 2,
            Error::Data(_) | Error::Underrun(_) | Error::Io(_) | Error::Checkpoint(_) => 3,
            Error::Numeric { .. } | Error::DegenerateRow { .. } => 4,
            Error::Field { source, .. } => source.exit_code(),
        }
    }
}
