//! End-to-end CT-volume-to-report pipeline: preprocessing, 3D patch
//! transformer encoding, visual-token adaptation, decoder language modeling
//! with low-rank adapters, two-stage training, sampling-based generation, a
//! synthetic labelled corpus, and surface-overlap evaluation metrics.

pub mod adapter;
mod blocks;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod trainer;
pub mod vocab;
pub mod volume;

pub use blocks::derive_seed;
pub use error::{CoreError, Result};
