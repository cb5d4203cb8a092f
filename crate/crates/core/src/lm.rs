//! Decoder-only language model with visual-token splicing and optional
//! low-rank adapters.
//!
//! [`splice_embeddings`] implements the multimodal input construction: token
//! ids before the `-200` sentinel embed to `M_q1`, ids after it to `M_q2`, and
//! the visual tokens `M_v` replace the sentinel, giving
//! `concat(M_q1, M_v, M_q2)` along the sequence. Positions are counted over
//! the spliced sequence, so visual tokens consume positional slots like any
//! other token.
//!
//! [`LmModel::forward`] is a standard pre-norm causal transformer over the
//! spliced embeddings. There is no final layer norm and the readout head has
//! no bias, so a depth-0 model is literally a linear readout of
//! (embedding + position) — a property the tests rely on.

use ctscribe_tensor::{Parameter, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{causal_mask, normal_tensor, Block, LayerLora, LoraPair};
use crate::error::{CoreError, Result};
use crate::prompt::{PromptSample, IMAGE_SENTINEL};
use crate::vocab::PAD;

/// Full structural description of the language model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmGeometry {
    pub vocab: usize,
    pub d_model: usize,
    /// Decoder depth; zero is legal (linear readout).
    pub depth: usize,
    pub heads: usize,
    pub max_seq: usize,
}

impl LmGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.heads == 0 || self.max_seq == 0 {
            return Err(CoreError::Config(
                "lm vocab, d_model, heads, and max_seq must be positive".to_string(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "lm heads {} must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// The decoder with its parameters. All names carry the `lm.` prefix.
pub struct LmModel<T: Scalar> {
    pub geo: LmGeometry,
    tok_embed: Parameter<T>,
    pos_embed: Parameter<T>,
    blocks: Vec<Block<T>>,
    head: Parameter<T>,
}

impl<T: Scalar> LmModel<T> {
    /// All weights (embeddings included) from N(0, 1/sqrt(d_model)) on a
    /// dedicated stream; the readout head has no bias. The 1/sqrt(d) scale
    /// keeps every frozen matrix close to unit gain, so activations and
    /// gradients cross the (mostly frozen) decoder without being crushed —
    /// the stand-in property a well-conditioned pretrained decoder would
    /// provide.
    pub fn init(geo: LmGeometry, seed: u64) -> Result<Self> {
        geo.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = geo.d_model;
        let std = (d as f64).sqrt().recip();
        let tok_embed = Parameter::new(
            "lm.tok_embed".to_string(),
            normal_tensor(&mut rng, &[geo.vocab, d], std),
        );
        // Positions get a deliberately low-amplitude code: enough for the
        // attention layers to tell order, small enough that position never
        // drowns out what a token (or spliced visual embedding) carries.
        let pos_embed = Parameter::new(
            "lm.pos_embed".to_string(),
            normal_tensor(&mut rng, &[geo.max_seq, d], 0.02),
        );
        let blocks = (0..geo.depth)
            .map(|i| Block::init(&format!("lm.block{i}"), d, geo.heads, std, &mut rng))
            .collect();
        let head = Parameter::new(
            "lm.head".to_string(),
            normal_tensor(&mut rng, &[d, geo.vocab], std),
        );
        Ok(LmModel {
            geo,
            tok_embed,
            pos_embed,
            blocks,
            head,
        })
    }

    pub fn params(&self) -> Vec<Parameter<T>> {
        let mut out = vec![self.tok_embed.clone(), self.pos_embed.clone()];
        for b in &self.blocks {
            b.collect(&mut out);
        }
        out.push(self.head.clone());
        out
    }

    pub fn embedding_table(&self) -> &Tensor<T> {
        self.tok_embed.tensor()
    }

    /// Embed a plain (non-negative) id sequence: `[len, d]`.
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Tensor<T>> {
        Ok(self.tok_embed.tensor().embedding_gather(ids)?)
    }

    /// Run the decoder over already-spliced embeddings `[L, d]`, producing
    /// logits `[L, vocab]`. `lora`, when present, must hold one adapter pair
    /// per block.
    pub fn forward(&self, embeds: &Tensor<T>, lora: Option<&LoraAdapters<T>>) -> Result<Tensor<T>> {
        let shape = embeds.shape();
        if shape.len() != 2 || shape[1] != self.geo.d_model {
            return Err(CoreError::Config(format!(
                "lm input must be [L, {}], got {shape:?}",
                self.geo.d_model
            )));
        }
        let l = shape[0];
        if l > self.geo.max_seq {
            return Err(CoreError::Config(format!(
                "sequence length {l} exceeds max_seq {}",
                self.geo.max_seq
            )));
        }
        if let Some(adapters) = lora {
            if adapters.layers.len() != self.blocks.len() {
                return Err(CoreError::Config(format!(
                    "{} adapter layers for {} blocks",
                    adapters.layers.len(),
                    self.blocks.len()
                )));
            }
        }

        let pos = self.pos_embed.tensor().narrow(0, 0, l)?;
        let mut x = embeds.add(&pos)?;
        if !self.blocks.is_empty() {
            let mask = causal_mask::<T>(l);
            for (i, block) in self.blocks.iter().enumerate() {
                let layer_lora = lora.map(|a| &a.layers[i]);
                x = block.apply(&x, Some(&mask), layer_lora)?;
            }
        }
        Ok(x.matmul(self.head.tensor())?)
    }
}

/// Low-rank adapters for every decoder block (query and value projections),
/// under the `lora.` name prefix.
pub struct LoraAdapters<T: Scalar> {
    pub layers: Vec<LayerLora<T>>,
}

impl<T: Scalar> LoraAdapters<T> {
    /// One q/v pair per block: A at fan-in scale, B zero — a fresh adapter
    /// leaves the model exactly at its base behavior.
    pub fn init(depth: usize, d_model: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 || !(alpha > 0.0) {
            return Err(CoreError::Config(
                "lora rank must be >= 1 and alpha > 0".to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..depth)
            .map(|i| LayerLora {
                q: LoraPair::init(&format!("lora.layer{i}.q"), d_model, rank, alpha, &mut rng),
                v: LoraPair::init(&format!("lora.layer{i}.v"), d_model, rank, alpha, &mut rng),
            })
            .collect();
        Ok(LoraAdapters { layers })
    }

    pub fn params(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.q.collect(&mut out);
            layer.v.collect(&mut out);
        }
        out
    }
}

/// A spliced input sequence ready for the decoder.
pub struct Spliced<T: Scalar> {
    /// `[L, d]` embeddings: text embeddings with visual tokens in place of the
    /// sentinel.
    pub embeds: Tensor<T>,
    /// Per-position target ids (PAD at visual positions, which are never
    /// targets).
    pub target_ids: Vec<usize>,
    /// Per-position loss mask (false at visual positions).
    pub target_mask: Vec<bool>,
}

/// Embed a prompt, splicing visual tokens at the sentinel.
///
/// With `m_v` present the prompt must contain exactly one sentinel; without
/// `m_v` the prompt must contain none (plain text-only path). `m_v` may be
/// `[N, d]` or `[1, N, d]`.
pub fn splice_embeddings<T: Scalar>(
    sample: &PromptSample,
    m_v: Option<&Tensor<T>>,
    embed_table: &Tensor<T>,
) -> Result<Spliced<T>> {
    let sentinels = sample
        .ids
        .iter()
        .filter(|&&id| id == IMAGE_SENTINEL)
        .count();
    let d = embed_table.shape()[1];

    let to_plain = |ids: &[i32]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                usize::try_from(id).map_err(|_| {
                    CoreError::Config(format!("negative non-sentinel token id {id} in prompt"))
                })
            })
            .collect()
    };

    match (m_v, sentinels) {
        (None, 0) => {
            let ids = to_plain(&sample.ids)?;
            let embeds = embed_table.embedding_gather(&ids)?;
            Ok(Spliced {
                embeds,
                target_ids: ids,
                target_mask: sample.loss_mask.clone(),
            })
        }
        (None, n) => Err(CoreError::Config(format!(
            "prompt has {n} sentinel(s) but no visual tokens were supplied"
        ))),
        (Some(_), 0) => Err(CoreError::Config(
            "visual tokens supplied but the prompt has no sentinel".to_string(),
        )),
        (Some(mv), 1) => {
            let mv = match mv.shape() {
                [1, n, dd] if *dd == d => mv.reshape(&[*n, d])?,
                [_, dd] if *dd == d => mv.clone(),
                other => {
                    return Err(CoreError::Config(format!(
                        "visual tokens must be [N, {d}] or [1, N, {d}], got {other:?}"
                    )))
                }
            };
            let n_vis = mv.shape()[0];
            let at = sample.sentinel_at().expect("sentinel counted above");
            let pre_ids = to_plain(&sample.ids[..at])?;
            let post_ids = to_plain(&sample.ids[at + 1..])?;

            let mut parts: Vec<Tensor<T>> = Vec::new();
            if !pre_ids.is_empty() {
                parts.push(embed_table.embedding_gather(&pre_ids)?);
            }
            parts.push(mv);
            if !post_ids.is_empty() {
                parts.push(embed_table.embedding_gather(&post_ids)?);
            }
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            let embeds = Tensor::concat(&refs, 0)?;

            let mut target_ids = Vec::with_capacity(pre_ids.len() + n_vis + post_ids.len());
            let mut target_mask = Vec::with_capacity(target_ids.capacity());
            target_ids.extend_from_slice(&pre_ids);
            target_mask.extend_from_slice(&sample.loss_mask[..at]);
            target_ids.extend(std::iter::repeat(PAD).take(n_vis));
            target_mask.extend(std::iter::repeat(false).take(n_vis));
            target_ids.extend_from_slice(&post_ids);
            target_mask.extend_from_slice(&sample.loss_mask[at + 1..]);

            Ok(Spliced {
                embeds,
                target_ids,
                target_mask,
            })
        }
        (Some(_), n) => Err(CoreError::Config(format!(
            "prompt must contain exactly one sentinel, found {n}"
        ))),
    }
}
