//! Run configuration: one TOML file describes the full pipeline shape.
//!
//! Two presets are provided in code — [`RunConfig::desk`] (small enough that every
//! stage runs in seconds on a laptop CPU) and [`RunConfig::paper`] (full-scale
//! volume geometry, used to exercise the shape laws at realistic sizes). The
//! `configs/` directory at the workspace root mirrors both as TOML files; a test
//! keeps file and code presets in sync.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeConfig {
    /// Target voxel grid (z, y, x) after resample + crop/pad.
    pub dims: [usize; 3],
    /// Target voxel spacing in millimetres (z, y, x).
    pub spacing_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Patch size (z, y, x); must divide `volume.dims` elementwise.
    pub patch: [usize; 3],
    /// Token embedding width of the volume encoder.
    pub embed_dim: usize,
    /// Number of transformer blocks in the encoder.
    pub depth: usize,
    /// Attention heads; must divide `embed_dim`.
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorKind {
    /// Single affine map from encoder width to LM width.
    Linear,
    /// Two affine maps with a GELU between, hidden width = LM width.
    Mlp2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Cubic pooling kernel applied over the patch grid; must divide each grid axis.
    pub pool_kernel: usize,
    /// Projector architecture mapping pooled tokens into LM embedding space.
    pub projector: ProjectorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    /// LM embedding width (also the projector output width).
    pub d_model: usize,
    /// Number of decoder blocks.
    pub depth: usize,
    /// Attention heads; must divide `d_model`.
    pub heads: usize,
    /// Maximum sequence length after visual tokens are spliced in.
    pub max_seq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    /// Low-rank update rank.
    pub rank: usize,
    /// Scaling numerator; the update is scaled by `alpha / rank`.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate for the projector-only stage.
    pub pretrain_lr: f64,
    /// Peak learning rate for the projector+LoRA stage.
    pub finetune_lr: f64,
    /// Epochs for the projector-only stage.
    pub pretrain_epochs: usize,
    /// Epochs for the projector+LoRA stage.
    pub finetune_epochs: usize,
    /// Global gradient-norm clip applied before every optimizer step.
    pub grad_clip: f64,
    /// Fraction of total steps spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    /// Sampling temperature; 0 means greedy argmax.
    pub temperature: f64,
    /// Hard cap on newly generated tokens per report.
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// System message prepended to every prompt.
    pub system: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub volume: VolumeConfig,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub prompt: PromptConfig,
}

impl RunConfig {
    /// Small preset: every stage (training included) runs in seconds on a CPU.
    pub fn desk() -> Self {
        RunConfig {
            volume: VolumeConfig {
                dims: [24, 48, 48],
                spacing_mm: [1.5, 0.75, 0.75],
            },
            encoder: EncoderConfig {
                patch: [3, 6, 6],
                embed_dim: 64,
                depth: 2,
                heads: 4,
            },
            adapter: AdapterConfig {
                pool_kernel: 2,
                projector: ProjectorKind::Mlp2,
            },
            lm: LmConfig {
                d_model: 64,
                depth: 2,
                heads: 4,
                max_seq: 256,
            },
            lora: LoraConfig {
                rank: 8,
                alpha: 16.0,
            },
            train: TrainConfig {
                pretrain_lr: 1e-3,
                finetune_lr: 2e-4,
                pretrain_epochs: 5,
                finetune_epochs: 2,
                grad_clip: 1.0,
                warmup_frac: 0.03,
            },
            generate: GenerateConfig {
                temperature: 0.7,
                max_new_tokens: 80,
            },
            prompt: PromptConfig {
                system: "you are a radiology assistant describing chest ct scans .".to_string(),
            },
        }
    }

    /// Full-scale volume geometry: 240x480x480 voxels, 15x30x30 patches,
    /// 512-wide tokens pooled down to 512 visual tokens. Encoder depth is kept
    /// shallow so a forward pass stays tractable on a CPU; the geometry (token
    /// counts and widths) is what this preset exists to exercise.
    pub fn paper() -> Self {
        RunConfig {
            volume: VolumeConfig {
                dims: [240, 480, 480],
                spacing_mm: [1.5, 0.75, 0.75],
            },
            encoder: EncoderConfig {
                patch: [15, 30, 30],
                embed_dim: 512,
                depth: 2,
                heads: 8,
            },
            adapter: AdapterConfig {
                pool_kernel: 2,
                projector: ProjectorKind::Linear,
            },
            lm: LmConfig {
                d_model: 512,
                depth: 2,
                heads: 8,
                max_seq: 1280,
            },
            lora: LoraConfig {
                rank: 8,
                alpha: 16.0,
            },
            train: TrainConfig {
                pretrain_lr: 1e-3,
                finetune_lr: 2e-4,
                pretrain_epochs: 5,
                finetune_epochs: 2,
                grad_clip: 1.0,
                warmup_frac: 0.03,
            },
            generate: GenerateConfig {
                temperature: 0.7,
                max_new_tokens: 256,
            },
            prompt: PromptConfig {
                system: "you are a radiology assistant describing chest ct scans .".to_string(),
            },
        }
    }

    /// Parse and validate a TOML config.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CoreError::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config from a TOML file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// Patch-grid extent per axis: `dims / patch`.
    pub fn patch_grid(&self) -> [usize; 3] {
        [
            self.volume.dims[0] / self.encoder.patch[0],
            self.volume.dims[1] / self.encoder.patch[1],
            self.volume.dims[2] / self.encoder.patch[2],
        ]
    }

    /// Number of visual tokens the LM receives after pooling.
    pub fn visual_tokens(&self) -> usize {
        let g = self.patch_grid();
        let k = self.adapter.pool_kernel;
        (g[0] / k) * (g[1] / k) * (g[2] / k)
    }

    /// Check every cross-field consistency rule. Returns a `Config` error with a
    /// message naming the first violated rule.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(CoreError::Config(msg));

        for axis in 0..3 {
            if self.volume.dims[axis] == 0 {
                return err(format!("volume.dims[{axis}] must be positive"));
            }
            if !(self.volume.spacing_mm[axis] > 0.0) {
                return err(format!("volume.spacing_mm[{axis}] must be positive"));
            }
            if self.encoder.patch[axis] == 0 {
                return err(format!("encoder.patch[{axis}] must be positive"));
            }
            if self.volume.dims[axis] % self.encoder.patch[axis] != 0 {
                return err(format!(
                    "encoder.patch[{axis}] = {} must divide volume.dims[{axis}] = {}",
                    self.encoder.patch[axis], self.volume.dims[axis]
                ));
            }
        }
        if self.encoder.embed_dim == 0 || self.encoder.heads == 0 {
            return err("encoder.embed_dim and encoder.heads must be positive".to_string());
        }
        if self.encoder.embed_dim % self.encoder.heads != 0 {
            return err(format!(
                "encoder.heads = {} must divide encoder.embed_dim = {}",
                self.encoder.heads, self.encoder.embed_dim
            ));
        }
        let grid = self.patch_grid();
        let k = self.adapter.pool_kernel;
        if k == 0 {
            return err("adapter.pool_kernel must be positive".to_string());
        }
        for axis in 0..3 {
            if grid[axis] % k != 0 {
                return err(format!(
                    "adapter.pool_kernel = {k} must divide patch-grid axis {axis} = {}",
                    grid[axis]
                ));
            }
        }
        if self.lm.d_model == 0 || self.lm.heads == 0 {
            return err("lm.d_model and lm.heads must be positive".to_string());
        }
        if self.lm.d_model % self.lm.heads != 0 {
            return err(format!(
                "lm.heads = {} must divide lm.d_model = {}",
                self.lm.heads, self.lm.d_model
            ));
        }
        if self.lm.depth == 0 || self.encoder.depth == 0 {
            return err("encoder.depth and lm.depth must be positive".to_string());
        }
        if self.visual_tokens() + 8 > self.lm.max_seq {
            return err(format!(
                "lm.max_seq = {} leaves no room for text after {} visual tokens",
                self.lm.max_seq,
                self.visual_tokens()
            ));
        }
        if self.lora.rank == 0 {
            return err("lora.rank must be positive".to_string());
        }
        if !(self.lora.alpha > 0.0) {
            return err("lora.alpha must be positive".to_string());
        }
        if !(self.train.pretrain_lr > 0.0) || !(self.train.finetune_lr > 0.0) {
            return err("learning rates must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.train.warmup_frac) {
            return err(format!(
                "train.warmup_frac = {} must lie in [0, 1]",
                self.train.warmup_frac
            ));
        }
        if !(self.train.grad_clip > 0.0) {
            return err("train.grad_clip must be positive".to_string());
        }
        if self.generate.temperature < 0.0 {
            return err(format!(
                "generate.temperature = {} must be >= 0",
                self.generate.temperature
            ));
        }
        if self.generate.max_new_tokens == 0 {
            return err("generate.max_new_tokens must be positive".to_string());
        }
        if self.prompt.system.trim().is_empty() {
            return err("prompt.system must not be empty".to_string());
        }
        Ok(())
    }
}
