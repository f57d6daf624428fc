//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong building graphs, loading data, training,
/// and running detection.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A network specification is internally inconsistent.
    #[error("invalid network spec: {0}")]
    Spec(String),

    /// An index (class label, node id, support entry) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A caller-supplied parameter is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// An on-disk artifact is malformed. `offset` is the byte position at
    /// which the problem was established.
    #[error("format error in {path} at offset {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Two inputs that must agree (e.g. image and label counts) do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A computation would divide by zero or otherwise leave the finite
    /// domain; refused instead of producing NaN/Inf.
    #[error("numeric guard: {0}")]
    NumericGuard(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    /// Trigger reverse-engineering failed.
    #[error("detection error: {0}")]
    Detection(String),

    /// The anomaly statistic is undefined (MAD = 0).
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    /// A patch or region does not fit inside its image.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// Configuration file problems (missing files, bad values).
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
