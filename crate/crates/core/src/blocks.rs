//! Shared neural building blocks: affine layers, layer norm, multi-head
//! attention (with optional causal masking and optional low-rank adapters),
//! and the pre-norm transformer block used by both the volume encoder and the
//! language model.
//!
//! All parameter initialization draws from per-component `ChaCha8Rng` streams
//! in a fixed construction order, so a (seed, config) pair fully determines
//! every weight at either precision.

use ctscribe_tensor::{Parameter, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Epsilon used by every layer norm in the model.
pub(crate) const LN_EPS: f64 = 1e-5;
/// Additive logit penalty for masked attention positions.
const ATTN_MASK_NEG: f64 = -1e9;
/// Weight init standard deviation used across the model.
pub(crate) const INIT_STD: f64 = 0.02;

/// Split a master seed into an independent per-component stream.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a over the tag bytes
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer to decorrelate master/tag combinations.
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A trainable tensor with i.i.d. N(0, std) entries. Values are drawn in f64
/// and converted, so f32 and f64 models built from one seed agree to rounding.
pub(crate) fn normal_tensor<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("init std must be non-negative");
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64_c(dist.sample(rng))).collect();
    Tensor::from_vec(data, shape)
        .expect("shape product matches data length")
        .with_requires_grad(true)
}

/// Affine map `y = x W + b` with `W: [d_in, d_out]`, `b: [d_out]`.
pub(crate) struct Linear<T: Scalar> {
    pub w: Parameter<T>,
    pub b: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    /// Weights N(0, std), bias zero. `name` is the parameter-name prefix.
    pub fn init(name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Parameter::new(format!("{name}.w"), normal_tensor(rng, &[d_in, d_out], std)),
            b: Parameter::new(
                format!("{name}.b"),
                Tensor::zeros(&[d_out]).with_requires_grad(true),
            ),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.matmul(self.w.tensor())?.add(self.b.tensor())?)
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        out.push(self.w.clone());
        out.push(self.b.clone());
    }
}

/// Layer norm parameters: gamma starts at 1, beta at 0.
pub(crate) struct LayerNorm<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn init(name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: Parameter::new(
                format!("{name}.gamma"),
                Tensor::full(&[d], T::one()).with_requires_grad(true),
            ),
            beta: Parameter::new(
                format!("{name}.beta"),
                Tensor::zeros(&[d]).with_requires_grad(true),
            ),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.layer_norm(self.gamma.tensor(), self.beta.tensor(), LN_EPS)?)
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }
}

/// One low-rank adapter: `delta(x) = (x A) B * (alpha / rank)` with
/// `A: [d, rank]` drawn N(0, 1/sqrt(d)) (fan-in scale) and `B: [rank, d]`
/// starting at zero, so a fresh adapter is an exact no-op.
pub struct LoraPair<T: Scalar> {
    pub a: Parameter<T>,
    pub b: Parameter<T>,
    scale: f64,
}

impl<T: Scalar> LoraPair<T> {
    pub(crate) fn init(name: &str, d: usize, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Self {
        let a_std = (d as f64).sqrt().recip();
        LoraPair {
            a: Parameter::new(format!("{name}.a"), normal_tensor(rng, &[d, rank], a_std)),
            b: Parameter::new(
                format!("{name}.b"),
                Tensor::zeros(&[rank, d]).with_requires_grad(true),
            ),
            scale: alpha / rank as f64,
        }
    }

    pub(crate) fn delta(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.matmul(self.a.tensor())?
            .matmul(self.b.tensor())?
            .scale(T::from_f64_c(self.scale))?)
    }

    pub(crate) fn collect(&self, out: &mut Vec<Parameter<T>>) {
        out.push(self.a.clone());
        out.push(self.b.clone());
    }
}

/// Low-rank adapters for one attention layer: query and value projections.
pub struct LayerLora<T: Scalar> {
    pub q: LoraPair<T>,
    pub v: LoraPair<T>,
}

/// Multi-head self-attention over a `[S, d]` sequence.
pub(crate) struct Attention<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> Attention<T> {
    pub fn init(name: &str, d: usize, heads: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Attention {
            wq: Linear::init(&format!("{name}.wq"), d, d, std, rng),
            wk: Linear::init(&format!("{name}.wk"), d, d, std, rng),
            wv: Linear::init(&format!("{name}.wv"), d, d, std, rng),
            wo: Linear::init(&format!("{name}.wo"), d, d, std, rng),
            heads,
        }
    }

    /// `mask` is an additive `[S, S]` tensor (0 = attend, large negative =
    /// blocked) broadcast over heads; `lora` optionally perturbs the query and
    /// value projections.
    pub fn apply(
        &self,
        x: &Tensor<T>,
        mask: Option<&Tensor<T>>,
        lora: Option<&LayerLora<T>>,
    ) -> Result<Tensor<T>> {
        let (s, d) = (x.shape()[0], x.shape()[1]);
        let h = self.heads;
        let dh = d / h;

        let mut q = self.wq.apply(x)?;
        let k = self.wk.apply(x)?;
        let mut v = self.wv.apply(x)?;
        if let Some(l) = lora {
            q = q.add(&l.q.delta(x)?)?;
            v = v.add(&l.v.delta(x)?)?;
        }

        // [S, d] -> [H, S, dh]
        let split = |t: &Tensor<T>| t.reshape(&[s, h, dh])?.permute(&[1, 0, 2]);
        let qh = split(&q)?;
        let kh = split(&k)?;
        let vh = split(&v)?;

        let kt = kh.permute(&[0, 2, 1])?; // [H, dh, S]
        let mut scores = qh
            .matmul(&kt)?
            .scale(T::from_f64_c(1.0 / (dh as f64).sqrt()))?; // [H, S, S]
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let attn = scores.softmax()?;
        let ctx = attn.matmul(&vh)?; // [H, S, dh]
        let merged = ctx.permute(&[1, 0, 2])?.reshape(&[s, d])?;
        self.wo.apply(&merged)
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        self.wq.collect(out);
        self.wk.collect(out);
        self.wv.collect(out);
        self.wo.collect(out);
    }
}

/// GELU MLP with hidden ratio 4.
pub(crate) struct Mlp<T: Scalar> {
    pub w1: Linear<T>,
    pub w2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init(name: &str, d: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            w1: Linear::init(&format!("{name}.mlp1"), d, 4 * d, std, rng),
            w2: Linear::init(&format!("{name}.mlp2"), 4 * d, d, std, rng),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.w2.apply(&self.w1.apply(x)?.gelu()?)
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        self.w1.collect(out);
        self.w2.collect(out);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub(crate) struct Block<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> Block<T> {
    pub fn init(name: &str, d: usize, heads: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Block {
            ln1: LayerNorm::init(&format!("{name}.ln1"), d),
            attn: Attention::init(&format!("{name}.attn"), d, heads, std, rng),
            ln2: LayerNorm::init(&format!("{name}.ln2"), d),
            mlp: Mlp::init(&format!("{name}"), d, std, rng),
        }
    }

    pub fn apply(
        &self,
        x: &Tensor<T>,
        mask: Option<&Tensor<T>>,
        lora: Option<&LayerLora<T>>,
    ) -> Result<Tensor<T>> {
        let x = x.add(&self.attn.apply(&self.ln1.apply(x)?, mask, lora)?)?;
        Ok(x.add(&self.mlp.apply(&self.ln2.apply(&x)?)?)?)
    }

    pub fn collect(&self, out: &mut Vec<Parameter<T>>) {
        self.ln1.collect(out);
        self.attn.collect(out);
        self.ln2.collect(out);
        self.mlp.collect(out);
    }
}

/// Additive causal mask: position i may attend to positions j <= i.
pub(crate) fn causal_mask<T: Scalar>(s: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); s * s];
    let neg = T::from_f64_c(ATTN_MASK_NEG);
    for i in 0..s {
        for j in (i + 1)..s {
            data[i * s + j] = neg;
        }
    }
    Tensor::from_vec(data, &[s, s]).expect("square mask")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn derive_seed_separates_tags_and_masters() {
        let a = derive_seed(1, "encoder");
        let b = derive_seed(1, "lm");
        let c = derive_seed(2, "encoder");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(1, "encoder"));
    }

    #[test]
    fn linear_applies_affine_map() {
        let mut r = rng();
        let lin = Linear::<f64>::init("t", 2, 2, 0.02, &mut r);
        lin.w.tensor().set_data(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        lin.b.tensor().set_data(&[10.0, 20.0]).unwrap();
        let x = Tensor::from_vec(vec![1.0, 1.0], &[1, 2]).unwrap();
        assert_eq!(lin.apply(&x).unwrap().to_vec(), vec![14.0, 26.0]);
    }

    #[test]
    fn attention_rows_are_convex_mixtures_of_values() {
        // With wo = identity and b = 0, each output row is a convex combination
        // of value rows; a constant value projection must pass through exactly.
        let mut r = rng();
        let attn = Attention::<f64>::init("t", 4, 2, 0.02, &mut r);
        let d = 4usize;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        attn.wo.w.tensor().set_data(&eye).unwrap();
        attn.wv.w.tensor().set_data(&eye).unwrap();
        let x = Tensor::from_vec(vec![0.5; 3 * d], &[3, d]).unwrap();
        let y = attn.apply(&x, None, None).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.5).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let m = causal_mask::<f64>(3);
        let v = m.to_vec();
        assert_eq!(v[0 * 3 + 0], 0.0);
        assert!(v[0 * 3 + 1] < -1e8);
        assert!(v[1 * 3 + 2] < -1e8);
        assert_eq!(v[2 * 3 + 0], 0.0);
        assert_eq!(v[2 * 3 + 2], 0.0);
    }

    #[test]
    fn fresh_lora_is_an_exact_no_op() {
        let mut r = rng();
        let lora = LoraPair::<f32>::init("t", 8, 2, 16.0, &mut r);
        let x = Tensor::from_vec((0..16).map(|i| i as f32 * 0.1).collect(), &[2, 8]).unwrap();
        let delta = lora.delta(&x).unwrap();
        assert!(delta.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_output_shape_matches_input() {
        let mut r = rng();
        let block = Block::<f32>::init("t", 8, 2, 0.02, &mut r);
        let x = Tensor::from_vec(vec![0.1; 5 * 8], &[5, 8]).unwrap();
        let y = block.apply(&x, None, None).unwrap();
        assert_eq!(y.shape(), &[5, 8]);
    }

    #[test]
    fn init_is_reproducible_from_seed() {
        let mk = || {
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(42, "x"));
            Linear::<f32>::init("t", 4, 4, 0.02, &mut r).w.tensor().to_vec()
        };
        assert_eq!(mk(), mk());
    }
}
