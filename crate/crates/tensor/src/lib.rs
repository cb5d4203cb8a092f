//! Dense tensors with reverse-mode automatic differentiation, plus the
//! training machinery built directly on them: named parameters, Adam with a
//! warmup/cosine learning-rate schedule, global-norm gradient clipping, and a
//! bitwise-round-trip binary checkpoint format.
//!
//! The same generic code runs at two precisions: `f32` for training and
//! inference, `f64` for finite-difference gradient verification.
//!
//! Determinism is a design contract, not an accident: every reduction has a
//! fixed summation order, and the only internal parallelism (matmul row
//! splitting) produces bit-identical results for any thread count.

pub mod checkpoint;
mod error;
mod ops;
mod optim;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{clip_global_norm, zero_grads, Adam, AdamConfig, Parameter};
pub use scalar::Scalar;
pub use tensor::{is_grad_enabled, no_grad, Tensor};
