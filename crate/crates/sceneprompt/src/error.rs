//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of operands are incompatible.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An attention/decoding context was empty (no keys to attend over).
    #[error("empty context: {0}")]
    EmptyContext(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A lookup used a token id outside the vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// An input collection that must be non-empty was empty.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A file did not conform to its declared format.
    #[error("parse error: {0}")]
    Parse(String),

    /// A numeric field violated its value constraints.
    #[error("value error: {0}")]
    Value(String),

    /// A requested size exceeded what is available.
    #[error("size error: {0}")]
    Size(String),

    /// An unknown category name was used.
    #[error("unknown category: {0}")]
    Category(String),

    /// Invalid arguments at construction time.
    #[error("construction error: {0}")]
    Construction(String),

    /// Optimizer state missing or inconsistent.
    #[error("optimizer state error: {0}")]
    State(String),

    /// A loss closure returned different values for identical inputs.
    #[error("non-deterministic loss function: {0}")]
    Determinism(String),

    /// An argument left the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A batch was too small for the requested loss.
    #[error("batch size error: {0}")]
    BatchSize(String),

    /// Rows expected to be unit-normalized were not.
    #[error("normalization error: {0}")]
    Normalization(String),

    /// A fused embedding collapsed to (numerically) zero norm.
    #[error("degenerate embedding: pre-normalization norm {0:e}")]
    DegenerateEmbedding(f64),

    /// Degenerate geometric input (zero-length ray, inverted box, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A 3D box corner projected from behind the camera.
    #[error("behind-camera error: corner {0} has z = {1}")]
    BehindCamera(usize, f64),

    /// A point-set loss was evaluated on an empty point set.
    #[error("empty point set: {0}")]
    EmptyPointSet(String),

    /// Clustering metrics need at least two clusters.
    #[error("cluster count error: {0}")]
    ClusterCount(String),

    /// Within-cluster dispersion vanished; the CH ratio is undefined.
    #[error("degenerate dispersion: Tr(W) = 0")]
    DegenerateDispersion,

    /// Covariance had no variance to decompose.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// An embedding-dump key did not match the expected layout.
    #[error("key error: {0}")]
    Key(String),

    /// Invalid run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: usage/validation problems exit 2, runtime
    /// failures exit 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Value(_)
            | Error::Size(_)
            | Error::ClusterCount(_)
            | Error::Parse(_)
            | Error::Key(_) => 2,
            _ => 1,
        }
    }
}
