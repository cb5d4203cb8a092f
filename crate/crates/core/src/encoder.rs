//! 3D patch transformer over prepared CT volumes.
//!
//! The volume is split into non-overlapping 3D patches, each patch is
//! flattened (z-major) and linearly embedded, learned positional embeddings
//! are added, and a stack of pre-norm transformer blocks runs over the full
//! token sequence. The output keeps the spatial arrangement as a 5-axis token
//! grid `[B, T, H', W', D]` so downstream pooling can act per axis.
//!
//! The encoder is deterministic for fixed parameters and is typically kept
//! frozen during training; all its parameters live under the `encoder.` name
//! prefix in checkpoints.

use ctscribe_tensor::{Parameter, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{normal_tensor, Block, Linear, INIT_STD};
use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::volume::PreparedVolume;

/// Full geometric description of the encoder: input grid, patching, and
/// transformer dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderGeometry {
    /// Expected input dims (z, y, x).
    pub input_dims: [usize; 3],
    /// Patch size (z, y, x).
    pub patch: [usize; 3],
    /// Token embedding width.
    pub embed_dim: usize,
    /// Transformer depth; zero is legal and leaves tokens at
    /// patch-embedding + positional-embedding.
    pub depth: usize,
    /// Attention heads.
    pub heads: usize,
}

impl EncoderGeometry {
    pub fn from_run(cfg: &RunConfig) -> Self {
        EncoderGeometry {
            input_dims: cfg.volume.dims,
            patch: cfg.encoder.patch,
            embed_dim: cfg.encoder.embed_dim,
            depth: cfg.encoder.depth,
            heads: cfg.encoder.heads,
        }
    }

    /// Patch-grid extent (T, H', W') = dims / patch.
    pub fn grid(&self) -> [usize; 3] {
        [
            self.input_dims[0] / self.patch[0],
            self.input_dims[1] / self.patch[1],
            self.input_dims[2] / self.patch[2],
        ]
    }

    /// Total token count T * H' * W'.
    pub fn token_count(&self) -> usize {
        let g = self.grid();
        g[0] * g[1] * g[2]
    }

    /// Voxels per patch.
    pub fn patch_len(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if self.patch[axis] == 0 || self.input_dims[axis] == 0 {
                return Err(CoreError::Config(format!(
                    "encoder geometry axis {axis}: dims and patch must be positive"
                )));
            }
            if self.input_dims[axis] % self.patch[axis] != 0 {
                return Err(CoreError::Config(format!(
                    "patch {:?} does not divide input dims {:?} on axis {axis}",
                    self.patch, self.input_dims
                )));
            }
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Split a prepared volume into flattened patches: `[1, T*H'*W', p_z*p_y*p_x]`.
///
/// Patch order is (t, h, w) lexicographic over the patch grid; within a patch,
/// voxels are flattened z-major. [`unpatchify`] is the exact inverse.
pub fn patchify<T: Scalar>(v: &PreparedVolume, geo: &EncoderGeometry) -> Result<Tensor<T>> {
    geo.validate()?;
    if v.dims != geo.input_dims {
        return Err(CoreError::Config(format!(
            "volume {} has dims {:?}, encoder expects {:?}",
            v.source_id, v.dims, geo.input_dims
        )));
    }
    let [pz, py, px] = geo.patch;
    let [gz, gy, gx] = geo.grid();
    let [_, ny, nx] = [v.dims[0], v.dims[1], v.dims[2]];

    let mut data = Vec::with_capacity(geo.token_count() * geo.patch_len());
    for tz in 0..gz {
        for th in 0..gy {
            for tw in 0..gx {
                for dz in 0..pz {
                    let z = tz * pz + dz;
                    for dy in 0..py {
                        let y = th * py + dy;
                        let row = (z * ny + y) * nx + tw * px;
                        for dx in 0..px {
                            data.push(T::from_f32_c(v.values[row + dx]));
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(
        data,
        &[1, geo.token_count(), geo.patch_len()],
    )?)
}

/// Inverse of [`patchify`]: rebuild the z-major voxel array.
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, geo: &EncoderGeometry) -> Result<Vec<T>> {
    geo.validate()?;
    let want = [1, geo.token_count(), geo.patch_len()];
    if patches.shape() != want {
        return Err(CoreError::Config(format!(
            "patch tensor shape {:?} does not match geometry (want {:?})",
            patches.shape(),
            want
        )));
    }
    let [pz, py, px] = geo.patch;
    let [gz, gy, gx] = geo.grid();
    let [nz, ny, nx] = geo.input_dims;
    let src = patches.to_vec();
    let mut out = vec![T::zero(); nz * ny * nx];
    let mut at = 0usize;
    for tz in 0..gz {
        for th in 0..gy {
            for tw in 0..gx {
                for dz in 0..pz {
                    let z = tz * pz + dz;
                    for dy in 0..py {
                        let y = th * py + dy;
                        let row = (z * ny + y) * nx + tw * px;
                        for dx in 0..px {
                            out[row + dx] = src[at];
                            at += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The patch transformer with its parameters.
pub struct EncoderModel<T: Scalar> {
    pub geo: EncoderGeometry,
    patch_embed: Linear<T>,
    pos: Parameter<T>,
    blocks: Vec<Block<T>>,
}

impl<T: Scalar> EncoderModel<T> {
    /// Initialize all weights from N(0, 0.02) (positional embeddings
    /// included), biases at zero, using a dedicated RNG stream.
    pub fn init(geo: EncoderGeometry, seed: u64) -> Result<Self> {
        geo.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = geo.embed_dim;
        let patch_embed = Linear::init("encoder.patch_embed", geo.patch_len(), d, INIT_STD, &mut rng);
        let pos = Parameter::new(
            "encoder.pos".to_string(),
            normal_tensor(&mut rng, &[geo.token_count(), d], INIT_STD),
        );
        let blocks = (0..geo.depth)
            .map(|i| Block::init(&format!("encoder.block{i}"), d, geo.heads, INIT_STD, &mut rng))
            .collect();
        Ok(EncoderModel {
            geo,
            patch_embed,
            pos,
            blocks,
        })
    }

    /// All parameters in construction order.
    pub fn params(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        self.patch_embed.collect(&mut out);
        out.push(self.pos.clone());
        for b in &self.blocks {
            b.collect(&mut out);
        }
        out
    }

    /// Encode a prepared volume into the token grid `[1, T, H', W', D]`.
    pub fn encode(&self, v: &PreparedVolume) -> Result<Tensor<T>> {
        let patches = patchify::<T>(v, &self.geo)?;
        let n = self.geo.token_count();
        let d = self.geo.embed_dim;

        let flat = patches.reshape(&[n, self.geo.patch_len()])?;
        let mut x = self.patch_embed.apply(&flat)?.add(self.pos.tensor())?;
        for block in &self.blocks {
            x = block.apply(&x, None, None)?;
        }
        let [gz, gy, gx] = self.geo.grid();
        Ok(x.reshape(&[1, gz, gy, gx, d])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctscribe_tensor::no_grad;

    fn volume(dims: [usize; 3], f: impl Fn(usize) -> f32) -> PreparedVolume {
        let n = dims.iter().product();
        PreparedVolume {
            source_id: "t".to_string(),
            dims,
            values: (0..n).map(f).collect(),
        }
    }

    fn desk_geo() -> EncoderGeometry {
        EncoderGeometry {
            input_dims: [24, 48, 48],
            patch: [3, 6, 6],
            embed_dim: 64,
            depth: 2,
            heads: 4,
        }
    }

    #[test]
    fn patchify_shapes_follow_division() {
        let geo = desk_geo();
        let v = volume([24, 48, 48], |_| 0.0);
        let p = patchify::<f32>(&v, &geo).unwrap();
        assert_eq!(p.shape(), &[1, 512, 108]);
    }

    #[test]
    fn patchify_unpatchify_round_trip_bitwise() {
        let geo = EncoderGeometry {
            input_dims: [4, 4, 4],
            patch: [2, 2, 2],
            embed_dim: 8,
            depth: 0,
            heads: 2,
        };
        let v = volume([4, 4, 4], |i| (i as f32) / 64.0 - 0.5);
        let p = patchify::<f32>(&v, &geo).unwrap();
        assert_eq!(p.shape(), &[1, 8, 8]);
        let back = unpatchify(&p, &geo).unwrap();
        assert_eq!(back, v.values);
    }

    #[test]
    fn patchify_rows_are_z_major_within_patch() {
        // 2x2x2 volume, single 2x2x2 patch: the row must equal the volume's
        // own z-major order.
        let geo = EncoderGeometry {
            input_dims: [2, 2, 2],
            patch: [2, 2, 2],
            embed_dim: 4,
            depth: 0,
            heads: 1,
        };
        let v = volume([2, 2, 2], |i| i as f32);
        let p = patchify::<f32>(&v, &geo).unwrap();
        assert_eq!(p.to_vec(), (0..8).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn indivisible_dims_are_a_config_error() {
        let geo = EncoderGeometry {
            input_dims: [5, 4, 4],
            patch: [2, 2, 2],
            embed_dim: 8,
            depth: 0,
            heads: 2,
        };
        let v = volume([5, 4, 4], |_| 0.0);
        let err = patchify::<f32>(&v, &geo).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn wrong_volume_dims_are_rejected() {
        let geo = desk_geo();
        let v = volume([24, 48, 24], |_| 0.0);
        assert!(patchify::<f32>(&v, &geo).is_err());
    }

    #[test]
    fn encode_emits_desk_token_grid() {
        let model = EncoderModel::<f32>::init(desk_geo(), 11).unwrap();
        let v = volume([24, 48, 48], |i| ((i % 97) as f32) / 97.0 - 0.5);
        let grid = no_grad(|| model.encode(&v)).unwrap();
        assert_eq!(grid.shape(), &[1, 8, 8, 8, 64]);
    }

    #[test]
    fn zero_depth_encoder_is_embedding_plus_position() {
        let geo = EncoderGeometry {
            input_dims: [2, 2, 2],
            patch: [1, 2, 2],
            embed_dim: 6,
            depth: 0,
            heads: 2,
        };
        let model = EncoderModel::<f64>::init(geo.clone(), 3).unwrap();
        let v = volume([2, 2, 2], |i| (i as f32) * 0.1 - 0.3);
        let grid = no_grad(|| model.encode(&v)).unwrap();
        assert_eq!(grid.shape(), &[1, 2, 1, 1, 6]);

        // Direct computation: row t of patches times W + b + pos[t].
        let patches = patchify::<f64>(&v, &geo).unwrap().to_vec();
        let w = model.patch_embed.w.tensor().to_vec();
        let b = model.patch_embed.b.tensor().to_vec();
        let pos = model.pos.tensor().to_vec();
        let got = grid.to_vec();
        for t in 0..2 {
            for c in 0..6 {
                let mut want = b[c] + pos[t * 6 + c];
                for i in 0..4 {
                    want += patches[t * 4 + i] * w[i * 6 + c];
                }
                let g = got[t * 6 + c];
                assert!((g - want).abs() < 1e-12, "token {t} ch {c}: {g} vs {want}");
            }
        }
    }

    #[test]
    fn shape_is_independent_of_parameter_values() {
        let model_a = EncoderModel::<f32>::init(desk_geo(), 1).unwrap();
        let model_b = EncoderModel::<f32>::init(desk_geo(), 2).unwrap();
        let v = volume([24, 48, 48], |i| ((i % 13) as f32) / 13.0);
        let ga = no_grad(|| model_a.encode(&v)).unwrap();
        let gb = no_grad(|| model_b.encode(&v)).unwrap();
        assert_eq!(ga.shape(), gb.shape());
    }

    #[test]
    fn single_voxel_difference_changes_the_grid() {
        let model = EncoderModel::<f32>::init(desk_geo(), 5).unwrap();
        let va = volume([24, 48, 48], |i| ((i % 31) as f32) / 31.0 - 0.5);
        let mut vb = va.clone();
        vb.values[12345] += 0.25;
        let ga = no_grad(|| model.encode(&va)).unwrap().to_vec();
        let gb = no_grad(|| model.encode(&vb)).unwrap().to_vec();
        assert!(ga.iter().zip(&gb).any(|(a, b)| a != b));
    }

    #[test]
    fn encode_is_referentially_transparent() {
        let model = EncoderModel::<f32>::init(desk_geo(), 9).unwrap();
        let v = volume([24, 48, 48], |i| ((i % 53) as f32) / 53.0 - 0.4);
        let a = no_grad(|| model.encode(&v)).unwrap().to_vec();
        let b = no_grad(|| model.encode(&v)).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn params_use_the_encoder_name_prefix() {
        let model = EncoderModel::<f32>::init(desk_geo(), 1).unwrap();
        let params = model.params();
        assert!(params.iter().all(|p| p.name().starts_with("encoder.")));
        // patch_embed (2) + pos (1) + 2 blocks x (ln1 2 + attn 8 + ln2 2 + mlp 4)
        assert_eq!(params.len(), 3 + 2 * 16);
    }
}
