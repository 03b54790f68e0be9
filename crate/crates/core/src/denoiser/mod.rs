//! Toy flow-matching diffusion transformer for masked video removal.
//!
//! Latents are the pixels themselves rescaled to `[-1, 1]`: there is no learned
//! autoencoder, so latent frame `f` is pixel frame `f` and the latent grid is the
//! pixel grid. Tokens are `p x p` patches of the channel concatenation
//! `(z_t, mask, input video)`.

mod attention;
mod checkpoint;
mod model;
mod sampler;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::video::VideoTensor;

pub use attention::{
    build_condition, framewise_cross_attention, ConditionProjector, ConditionSequence,
    CrossAttention, SelfAttention,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use model::{Denoiser, DenoiserInput, DenoiserOutput};
pub use sampler::{sample, DiffusionRemover, Remover, DEFAULT_SAMPLE_STEPS};

/// Missing keys in a serialized config take the [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiTConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    /// 1-based block whose output is exposed for relation distillation.
    pub align_block: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Length of the learned empty-prompt token sequence.
    #[serde(default = "default_prompt_tokens")]
    pub prompt_tokens: usize,
    /// Patch size and width of the frozen background encoder.
    #[serde(default = "default_vision_patch")]
    pub vision_patch: usize,
    #[serde(default = "default_vision_dim")]
    pub vision_dim: usize,
    #[serde(default = "default_vision_seed")]
    pub vision_seed: u64,
    /// Zero-initialize the velocity head (standard for DiT training).
    #[serde(default = "default_true")]
    pub zero_init_head: bool,
    pub prediction: Prediction,
    /// Lower bound on `t` when converting a clean prediction into a velocity.
    pub t_floor: f64,
}

/// What the output head parameterizes. The model always returns a velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The head output is the velocity itself.
    Velocity,
    /// The head predicts a correction `r` to the encoded input video, `x̂0 = z_in + r`,
    /// and the velocity is `(z_t - x̂0) / max(t, t_floor)`. A zero head then reproduces
    /// the input, and the head never has to carry the per-pixel noise through the
    /// token bottleneck.
    CleanResidual,
}

fn default_mlp_ratio() -> usize {
    4
}
fn default_prompt_tokens() -> usize {
    4
}
fn default_vision_patch() -> usize {
    8
}
fn default_vision_dim() -> usize {
    64
}
fn default_vision_seed() -> u64 {
    0x5eed_0c11
}
fn default_true() -> bool {
    true
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self::with_depth(4, 96, 4, 8)
    }
}

impl DiTConfig {
    /// Alignment block at mid-depth, `ceil(depth / 2)`.
    pub fn with_depth(depth: usize, hidden: usize, heads: usize, patch: usize) -> Self {
        Self {
            depth,
            hidden,
            heads,
            patch,
            align_block: depth.div_ceil(2).max(1),
            mlp_ratio: default_mlp_ratio(),
            prompt_tokens: default_prompt_tokens(),
            vision_patch: default_vision_patch(),
            vision_dim: default_vision_dim(),
            vision_seed: default_vision_seed(),
            zero_init_head: true,
            prediction: Prediction::CleanResidual,
            t_floor: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 || self.patch == 0 {
            return Err(invalid!("depth, hidden, heads and patch must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(invalid!(
                "hidden {} not divisible by heads {}",
                self.hidden,
                self.heads
            ));
        }
        if self.align_block == 0 || self.align_block > self.depth {
            return Err(invalid!(
                "align_block {} outside [1, {}]",
                self.align_block,
                self.depth
            ));
        }
        if !(self.t_floor > 0.0 && self.t_floor <= 1.0) {
            return Err(invalid!("t_floor {} outside (0, 1]", self.t_floor));
        }
        if self.prompt_tokens == 0 || self.mlp_ratio == 0 {
            return Err(invalid!("prompt_tokens and mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Token grid for `height x width` frames.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height % self.patch != 0 || width % self.patch != 0 {
            return Err(invalid!(
                "{height}x{width} frames not divisible by patch {}",
                self.patch
            ));
        }
        Ok((height / self.patch, width / self.patch))
    }
}

/// A latent clip `[C, F, H, W]`; optionally batched as `[B, C, F, H, W]`.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    data: Tensor,
}

impl LatentTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let rank = data.rank();
        if rank != 4 && rank != 5 {
            return Err(invalid!("latent must be rank 4 or 5, got {rank}"));
        }
        Ok(Self { data })
    }

    /// Pixel `[0, 1]` → latent `[-1, 1]`.
    pub fn encode(video: &VideoTensor, dtype: DType, device: &Device) -> Result<Self> {
        let t = video.to_tensor(dtype, device)?;
        Self::new(t.affine(2.0, -1.0)?)
    }

    /// Latent → pixels, clamped into `[0, 1]`. Accepts unbatched or single-entry batches.
    pub fn decode(&self) -> Result<VideoTensor> {
        let t = if self.data.rank() == 5 {
            self.data.squeeze(0)?
        } else {
            self.data.clone()
        };
        VideoTensor::from_tensor(&t.affine(0.5, 0.5)?)
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

fn same_shape(a: &LatentTensor, b: &LatentTensor) -> Result<()> {
    if a.data.dims() != b.data.dims() {
        return Err(invalid!(
            "latent shapes differ: {:?} vs {:?}",
            a.data.dims(),
            b.data.dims()
        ));
    }
    Ok(())
}

/// `z_t = t·ε + (1 − t)·z_0`.
pub fn noise_latent(z0: &LatentTensor, eps: &LatentTensor, t: f64) -> Result<LatentTensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid!("t = {t} outside [0, 1]"));
    }
    same_shape(z0, eps)?;
    LatentTensor::new(((&eps.data * t)? + (&z0.data * (1.0 - t))?)?)
}

/// `v = dz_t/dt = ε − z_0`.
pub fn velocity_target(z0: &LatentTensor, eps: &LatentTensor) -> Result<LatentTensor> {
    same_shape(z0, eps)?;
    LatentTensor::new((&eps.data - &z0.data)?)
}
