//! The full report-generation model: frozen CT encoder, pooling adapter,
//! trainable projector, decoder LM, and LoRA adapters, bundled behind one
//! seed-deterministic constructor.
//!
//! Component seeds are derived from the master seed by name, so adding or
//! removing one component never shifts the initialization of another.

use std::collections::HashSet;
use std::path::Path;

use ctscribe_tensor::{checkpoint, no_grad, Parameter, Scalar, Tensor};

use crate::adapter::{adapt_tokens, Projector};
use crate::blocks::derive_seed;
use crate::config::RunConfig;
use crate::encoder::{EncoderGeometry, EncoderModel};
use crate::error::{CoreError, Result};
use crate::lm::{LmGeometry, LmModel, LoraAdapters};
use crate::volume::PreparedVolume;

/// Parameter-name prefixes that train during projector pretraining.
pub const PRETRAIN_PREFIXES: &[&str] = &["projector."];
/// Parameter-name prefixes that train during fine-tuning.
pub const FINETUNE_PREFIXES: &[&str] = &["projector.", "lora."];

pub struct ModelBundle<T: Scalar> {
    pub cfg: RunConfig,
    pub encoder: EncoderModel<T>,
    pub projector: Projector<T>,
    pub lm: LmModel<T>,
    pub lora: LoraAdapters<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Build every component from the run configuration and a master seed.
    pub fn init(cfg: &RunConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = EncoderModel::init(EncoderGeometry::from_run(cfg), derive_seed(seed, "encoder"))?;
        let projector = Projector::init(
            cfg.adapter.projector,
            cfg.encoder.embed_dim,
            cfg.lm.d_model,
            derive_seed(seed, "projector"),
        )?;
        let lm = LmModel::init(
            LmGeometry {
                vocab: vocab_size,
                d_model: cfg.lm.d_model,
                depth: cfg.lm.depth,
                heads: cfg.lm.heads,
                max_seq: cfg.lm.max_seq,
            },
            derive_seed(seed, "lm"),
        )?;
        let lora = LoraAdapters::init(
            cfg.lm.depth,
            cfg.lm.d_model,
            cfg.lora.rank,
            cfg.lora.alpha,
            derive_seed(seed, "lora"),
        )?;
        let bundle = ModelBundle {
            cfg: cfg.clone(),
            encoder,
            projector,
            lm,
            lora,
        };
        bundle.check_unique_names()?;
        Ok(bundle)
    }

    fn check_unique_names(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in self.params() {
            if !seen.insert(p.name().to_string()) {
                return Err(CoreError::Contract(format!(
                    "duplicate parameter name {:?}",
                    p.name()
                )));
            }
        }
        Ok(())
    }

    /// Every parameter, in a fixed order: encoder, projector, LM, LoRA.
    pub fn params(&self) -> Vec<Parameter<T>> {
        let mut out = self.encoder.params();
        out.extend(self.projector.params());
        out.extend(self.lm.params());
        out.extend(self.lora.params());
        out
    }

    /// Parameters whose names start with any of the given prefixes.
    pub fn params_with_prefixes(&self, prefixes: &[&str]) -> Vec<Parameter<T>> {
        self.params()
            .into_iter()
            .filter(|p| prefixes.iter().any(|pre| p.name().starts_with(pre)))
            .collect()
    }

    /// Freeze everything, then unfreeze parameters matching the prefixes.
    /// Returns the trainable parameter list.
    pub fn set_trainable(&self, prefixes: &[&str]) -> Vec<Parameter<T>> {
        let mut trainable = Vec::new();
        for p in self.params() {
            if prefixes.iter().any(|pre| p.name().starts_with(pre)) {
                p.unfreeze();
                trainable.push(p);
            } else {
                p.freeze();
            }
        }
        trainable
    }

    /// `(name, fingerprint)` for every currently frozen parameter.
    pub fn frozen_fingerprints(&self) -> Vec<(String, u64)> {
        self.params()
            .iter()
            .filter(|p| p.is_frozen())
            .map(|p| (p.name().to_string(), p.data_fingerprint()))
            .collect()
    }

    /// Pooled visual tokens for one prepared volume, shape `[1, N, D]`.
    /// Runs without building a graph: the encoder never trains, so this
    /// value can be cached per record for a whole run.
    pub fn visual_tokens(&self, v: &PreparedVolume) -> Result<Tensor<T>> {
        no_grad(|| {
            let grid = self.encoder.encode(v)?;
            adapt_tokens(&grid, self.cfg.adapter.pool_kernel)
        })
    }

    /// Project cached visual tokens into LM embedding space (differentiable
    /// through the projector).
    pub fn project_visual(&self, visual: &Tensor<T>) -> Result<Tensor<T>> {
        self.projector.apply(visual)
    }

    /// Number of visual tokens the adapter emits per volume.
    pub fn n_visual(&self) -> usize {
        let g = EncoderGeometry::from_run(&self.cfg).grid();
        let k = self.cfg.adapter.pool_kernel;
        (g[0] / k) * (g[1] / k) * (g[2] / k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params(), path).map_err(CoreError::from)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        checkpoint::load(&self.params(), path).map_err(CoreError::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::volume::PreparedVolume;

    fn prepared(cfg: &RunConfig) -> PreparedVolume {
        let [nz, ny, nx] = cfg.volume.dims;
        let n = nz * ny * nx;
        let values: Vec<f32> = (0..n).map(|i| ((i % 97) as f32 / 96.0) * 2.0 - 1.0).collect();
        PreparedVolume {
            source_id: "t".to_string(),
            dims: cfg.volume.dims,
            values,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = RunConfig::desk();
        let a = ModelBundle::<f32>::init(&cfg, 40, 7).unwrap();
        let b = ModelBundle::<f32>::init(&cfg, 40, 7).unwrap();
        let fa: Vec<u64> = a.params().iter().map(|p| p.data_fingerprint()).collect();
        let fb: Vec<u64> = b.params().iter().map(|p| p.data_fingerprint()).collect();
        assert_eq!(fa, fb);
        let c = ModelBundle::<f32>::init(&cfg, 40, 8).unwrap();
        let fc: Vec<u64> = c.params().iter().map(|p| p.data_fingerprint()).collect();
        assert_ne!(fa, fc);
    }

    #[test]
    fn param_names_are_unique_and_counted() {
        let cfg = RunConfig::desk();
        let bundle = ModelBundle::<f32>::init(&cfg, 40, 0).unwrap();
        let params = bundle.params();
        // encoder: patch embed w+b, pos, 2 blocks of 16
        // projector (mlp2): 4; lm: tok, pos, head + 2 blocks of 16; lora: 2 layers * 4
        assert_eq!(params.len(), 35 + 4 + 35 + 8);
        let names: HashSet<_> = params.iter().map(|p| p.name().to_string()).collect();
        assert_eq!(names.len(), params.len());
    }

    #[test]
    fn stage_prefixes_select_expected_parameters() {
        let cfg = RunConfig::desk();
        let bundle = ModelBundle::<f32>::init(&cfg, 40, 0).unwrap();
        let pre = bundle.set_trainable(PRETRAIN_PREFIXES);
        assert_eq!(pre.len(), 4);
        assert!(pre.iter().all(|p| p.name().starts_with("projector.")));
        assert!(bundle.params().iter().filter(|p| p.is_frozen()).count() == 35 + 35 + 8);

        let fine = bundle.set_trainable(FINETUNE_PREFIXES);
        assert_eq!(fine.len(), 4 + 8);
        let frozen = bundle.frozen_fingerprints();
        assert_eq!(frozen.len(), 35 + 35);
        assert!(frozen.iter().all(|(n, _)| n.starts_with("encoder.") || n.starts_with("lm.")));
    }

    #[test]
    fn visual_tokens_have_adapter_geometry_and_no_graph() {
        let cfg = RunConfig::desk();
        let bundle = ModelBundle::<f32>::init(&cfg, 40, 3).unwrap();
        let pv = bundle.visual_tokens(&prepared(&cfg)).unwrap();
        assert_eq!(pv.shape(), &[1, bundle.n_visual(), cfg.encoder.embed_dim]);
        assert_eq!(bundle.n_visual(), 64);
        let m_v = bundle.project_visual(&pv).unwrap();
        assert_eq!(m_v.shape(), &[1, 64, cfg.lm.d_model]);
    }

    #[test]
    fn checkpoint_round_trip_restores_every_parameter() {
        let cfg = RunConfig::desk();
        let a = ModelBundle::<f32>::init(&cfg, 40, 1).unwrap();
        let b = ModelBundle::<f32>::init(&cfg, 40, 2).unwrap();
        let before: Vec<u64> = a.params().iter().map(|p| p.data_fingerprint()).collect();
        let after_b: Vec<u64> = b.params().iter().map(|p| p.data_fingerprint()).collect();
        assert_ne!(before, after_b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        a.save(&path).unwrap();
        b.load(&path).unwrap();
        let after: Vec<u64> = b.params().iter().map(|p| p.data_fingerprint()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn f64_bundle_builds_for_gradient_checking() {
        let cfg = RunConfig::desk();
        let bundle = ModelBundle::<f64>::init(&cfg, 30, 5).unwrap();
        let pv = bundle.visual_tokens(&prepared(&cfg)).unwrap();
        assert_eq!(pv.shape()[2], cfg.encoder.embed_dim);
    }
}
