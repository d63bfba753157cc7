//! Error taxonomy shared across the workspace.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched vector/tensor dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input violates a manifold precondition (off-manifold point,
    /// non-tangent vector, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Bad argument values (weights that do not sum to one, unknown ids, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed hierarchy (cycles, multiple roots, orphans).
    #[error("structure error: {0}")]
    Structure(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training-time failures (NaN gradients, diverging loss).
    #[error("training error: {0}")]
    Training(String),

    /// Inconsistent data (gold answers that cannot be aligned, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid run configuration or missing files named by it.
    #[error("config error: {0}")]
    Config(String),

    /// Model-level contract violations (all-masked visit, ...).
    #[error("modeling error: {0}")]
    Modeling(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
