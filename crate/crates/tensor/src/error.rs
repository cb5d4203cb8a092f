//! Error type shared by tensor operations, the optimizer and checkpoint I/O.

use thiserror::Error;

/// Errors produced by this crate.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Two shapes that had to agree (exactly or via broadcasting) did not.
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single-tensor shape constraint was violated.
    #[error("invalid shape: {context}: got {shape:?}")]
    InvalidShape {
        context: &'static str,
        shape: Vec<usize>,
    },

    /// An axis/index argument was out of range for the tensor's rank or dims.
    #[error("index out of range: {context}: {index} not in 0..{bound}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    /// The operation's semantic preconditions failed (e.g. empty loss mask).
    #[error("invalid operation: {0}")]
    InvalidOperation(String),

    /// `Optimizer::step` was called while a trainable parameter had no gradient.
    #[error("missing gradient for parameter `{0}`; run backward() before step()")]
    MissingGrad(String),

    /// Checkpoint bytes did not parse.
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    /// Checkpoint contents did not match the model it was loaded into.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Underlying I/O failure during checkpoint read/write.
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, TensorError>;
