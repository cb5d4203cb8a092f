//! Bridge from encoder token grids to LM-ready visual tokens.
//!
//! [`adapt_tokens`] applies a fixed four-step tensor transformation — permute
//! the channel axis forward, average-pool the spatial grid with a cubic
//! kernel, flatten the pooled grid, and permute tokens back in front of
//! channels — turning `[B, T, H', W', D]` into `[B, N, D]` with
//! `N = (T/k)(H'/k)(W'/k)`.
//!
//! [`Projector`] then maps each token into the language model's embedding
//! space, either with a single affine layer or a 2-layer GELU MLP whose hidden
//! width equals the LM width.

use ctscribe_tensor::{Parameter, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Linear, INIT_STD};
use crate::config::ProjectorKind;
use crate::error::{CoreError, Result};

/// Pool and flatten a token grid into a visual-token sequence.
///
/// The transformation is exactly:
/// `permute([0,4,1,2,3])` → `avg_pool3d(k)` → `reshape([B, D, N])` →
/// `permute([0,2,1])`.
pub fn adapt_tokens<T: Scalar>(grid: &Tensor<T>, pool_kernel: usize) -> Result<Tensor<T>> {
    let shape = grid.shape();
    if shape.len() != 5 {
        return Err(CoreError::Config(format!(
            "token grid must be rank 5 [B, T, H', W', D], got {shape:?}"
        )));
    }
    if pool_kernel == 0 {
        return Err(CoreError::Config("pool kernel must be positive".to_string()));
    }
    for axis in 1..4 {
        if shape[axis] % pool_kernel != 0 {
            return Err(CoreError::Config(format!(
                "pool kernel {pool_kernel} does not divide grid axis {axis} of {shape:?}"
            )));
        }
    }
    let (b, d) = (shape[0], shape[4]);
    let n = (shape[1] / pool_kernel) * (shape[2] / pool_kernel) * (shape[3] / pool_kernel);

    let channels_first = grid.permute(&[0, 4, 1, 2, 3])?; // [B, D, T, H', W']
    let pooled = channels_first.avg_pool3d(pool_kernel)?; // [B, D, T/k, H'/k, W'/k]
    let flat = pooled.reshape(&[b, d, n])?; // [B, D, N]
    Ok(flat.permute(&[0, 2, 1])?) // [B, N, D]
}

/// Token-wise map from encoder width into LM embedding width.
pub struct Projector<T: Scalar> {
    kind: ProjectorKind,
    l1: Linear<T>,
    l2: Option<Linear<T>>,
}

impl<T: Scalar> Projector<T> {
    /// Weights N(0, 0.02), biases zero, drawn from a dedicated RNG stream.
    /// For [`ProjectorKind::Mlp2`] the hidden width equals `d_llm`.
    pub fn init(kind: ProjectorKind, d_in: usize, d_llm: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_llm == 0 {
            return Err(CoreError::Config(
                "projector widths must be positive".to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l1, l2) = match kind {
            ProjectorKind::Linear => (
                Linear::init("projector.l1", d_in, d_llm, INIT_STD, &mut rng),
                None,
            ),
            ProjectorKind::Mlp2 => (
                Linear::init("projector.l1", d_in, d_llm, INIT_STD, &mut rng),
                Some(Linear::init("projector.l2", d_llm, d_llm, INIT_STD, &mut rng)),
            ),
        };
        Ok(Projector { kind, l1, l2 })
    }

    pub fn kind(&self) -> ProjectorKind {
        self.kind
    }

    /// Map `[B, N, d_in]` (or `[N, d_in]`) tokens to the LM width.
    pub fn apply(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.l1.apply(tokens)?;
        match &self.l2 {
            None => Ok(h),
            Some(l2) => l2.apply(&h.gelu()?),
        }
    }

    pub fn params(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        self.l1.collect(&mut out);
        if let Some(l2) = &self.l2 {
            l2.collect(&mut out);
        }
        out
    }
}
