//! Error taxonomy for the pipeline.
//!
//! Errors are grouped by *who has to fix them*:
//!
//! * [`CoreError::Config`] — the run configuration is invalid (bad TOML, inconsistent
//!   dimensions, unknown strategy name). Fix the config file or flags.
//! * [`CoreError::Data`] — an input artifact is malformed or missing (volume files,
//!   manifests, vocab files, checkpoints that fail to parse). Fix the data.
//! * [`CoreError::Contract`] — an internal invariant was violated (shape drift,
//!   frozen parameters changing, values outside a documented range). These indicate
//!   a bug or silent corruption and are never the caller's fault.
//!
//! The CLI maps these groups onto distinct process exit codes.

use ctscribe_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid run configuration: unparseable or internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or missing input data (volumes, manifests, vocab, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// Violated internal invariant; indicates a bug, not a user mistake.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Underlying tensor-library failure. Tensor errors surface when shapes or
    /// graph state are wrong, which is always an internal invariant breach here.
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    /// Stable process exit code for this error class.
    ///
    /// `0` is success; `1` is reserved for unexpected panics. Config, data, and
    /// contract errors get distinct codes so scripts can tell them apart.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) => 2,
            CoreError::Data(_) | CoreError::Io(_) => 3,
            CoreError::Contract(_) | CoreError::Tensor(_) => 4,
        }
    }
}
