use candle_core::{DType, Device, Tensor};

use super::attention::{
    build_condition, framewise_cross_attention, ConditionProjector, ConditionSequence,
    CrossAttention, SelfAttention,
};
use super::{DiTConfig, Prediction};
use crate::error::{invalid, Result};
use crate::nn::{self, Dense, VarStore};
use crate::relation::{FeatureSource, FrozenPatchEncoder, TokenFeatures};
use crate::video::{MaskTensor, VideoTensor};

const LN_EPS: f64 = 1e-6;
const TIME_FREQS: usize = 64;
/// Latent channels (RGB) and conditioning channels: noisy latent, mask, input video.
const LATENT_CHANNELS: usize = 3;
const INPUT_CHANNELS: usize = LATENT_CHANNELS + 1 + LATENT_CHANNELS;

#[derive(Debug, Clone)]
struct Block {
    time: Dense,
    spatial: SelfAttention,
    temporal: SelfAttention,
    cross: CrossAttention,
    fc1: Dense,
    fc2: Dense,
}

impl Block {
    fn new(vs: &mut VarStore, prefix: &str, cfg: &DiTConfig) -> Result<Self> {
        let d = cfg.hidden;
        Ok(Self {
            time: Dense::new(vs, &format!("{prefix}.time"), d, d)?,
            spatial: SelfAttention::new(vs, &format!("{prefix}.spatial"), d, cfg.heads)?,
            temporal: SelfAttention::new(vs, &format!("{prefix}.temporal"), d, cfg.heads)?,
            cross: CrossAttention::new(vs, &format!("{prefix}.cross"), d, d, cfg.heads)?,
            fc1: Dense::new(vs, &format!("{prefix}.mlp.fc1"), d, cfg.mlp_ratio * d)?,
            fc2: Dense::new(vs, &format!("{prefix}.mlp.fc2"), cfg.mlp_ratio * d, d)?,
        })
    }

    /// `x`: `[B, F, N, D]`, `temb`: `[B, D]` (already passed through SiLU).
    fn forward(&self, x: &Tensor, temb: &Tensor, cond: &ConditionSequence) -> Result<Tensor> {
        let (b, f, n, d) = x.dims4()?;
        let x = x.broadcast_add(&self.time.forward(temb)?.reshape((b, 1, 1, d))?)?;

        let spatial = self
            .spatial
            .forward(&nn::layer_norm(&x, LN_EPS)?.reshape((b * f, n, d))?)?;
        let x = (x + spatial.reshape((b, f, n, d))?)?;

        let across_time = nn::layer_norm(&x, LN_EPS)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * n, f, d))?;
        let temporal = self
            .temporal
            .forward(&across_time)?
            .reshape((b, n, f, d))?
            .transpose(1, 2)?
            .contiguous()?;
        let x = (x + temporal)?;

        let x = (&x + framewise_cross_attention(&nn::layer_norm(&x, LN_EPS)?, cond, &self.cross)?)?;

        let mlp = self
            .fc2
            .forward(&self.fc1.forward(&nn::layer_norm(&x, LN_EPS)?)?.gelu()?)?;
        Ok((x + mlp)?)
    }
}

/// Inputs of one denoising call, all batched with the same `B`.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    /// Noisy latent `[B, 3, F, H, W]`.
    pub z_t: &'a Tensor,
    /// One flow time per batch entry.
    pub t: &'a [f64],
    /// Object mask at latent resolution, `[B, 1, F, H, W]` in `{0, 1}`.
    pub mask: &'a Tensor,
    /// Encoded input video `[B, 3, F, H, W]`.
    pub v_in: &'a Tensor,
    pub cond: &'a ConditionSequence,
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// Predicted velocity, same shape as `z_t`.
    pub velocity: Tensor,
    /// Output of the alignment block, `[B, F, N, D]`.
    pub hidden: Tensor,
    pub grid: (usize, usize),
}

impl DenoiserOutput {
    /// Alignment-block features of batch entry `b`.
    pub fn hidden_features(&self, b: usize) -> Result<TokenFeatures> {
        TokenFeatures::new(self.hidden.get(b)?, self.grid, FeatureSource::StudentHidden)
    }
}

/// The diffusion transformer plus its background-conditioning branch.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DiTConfig,
    dtype: DType,
    device: Device,
    embed: Dense,
    time_fc1: Dense,
    time_fc2: Dense,
    blocks: Vec<Block>,
    head_mod: Dense,
    head_out: Dense,
    cond: ConditionProjector,
    vision: FrozenPatchEncoder,
}

impl Denoiser {
    /// Builds the model, creating any parameter not already present in `vs`.
    pub fn new(config: &DiTConfig, vs: &mut VarStore) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let p = config.patch;
        let out_dim = LATENT_CHANNELS * p * p;
        let blocks = (0..config.depth)
            .map(|i| Block::new(vs, &format!("dit.blocks.{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let head_out = if config.zero_init_head {
            Dense::zeros(vs, "dit.head.out", d, out_dim)?
        } else {
            Dense::new(vs, "dit.head.out", d, out_dim)?
        };
        Ok(Self {
            config: config.clone(),
            dtype: vs.dtype(),
            device: vs.device().clone(),
            embed: Dense::new(vs, "dit.embed", INPUT_CHANNELS * p * p, d)?,
            time_fc1: Dense::new(vs, "dit.time.fc1", TIME_FREQS, d)?,
            time_fc2: Dense::new(vs, "dit.time.fc2", d, d)?,
            blocks,
            head_mod: Dense::zeros(vs, "dit.head.mod", d, 2 * d)?,
            head_out,
            cond: ConditionProjector::new(vs, "cond", config.vision_dim, d, config.prompt_tokens)?,
            vision: FrozenPatchEncoder::new(
                config.vision_patch,
                config.vision_dim,
                config.vision_seed,
            )?,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vision_encoder(&self) -> &FrozenPatchEncoder {
        &self.vision
    }

    pub fn condition_projector(&self) -> &ConditionProjector {
        &self.cond
    }

    /// Background condition for one clip.
    pub fn condition(&self, v_ori: &VideoTensor, m_obj: &MaskTensor) -> Result<ConditionSequence> {
        build_condition(
            &self.cond.prompt,
            v_ori,
            m_obj,
            &self.vision,
            &self.cond,
            self.dtype,
            &self.device,
        )
    }

    fn positions(&self, frames: usize, grid: (usize, usize)) -> Result<Tensor> {
        let d = self.config.hidden;
        let (gh, gw) = grid;
        let quarter = d / 2;
        let ys: Vec<f64> = (0..gh).map(|y| y as f64).collect();
        let xs: Vec<f64> = (0..gw).map(|x| x as f64).collect();
        let fs: Vec<f64> = (0..frames).map(|f| f as f64).collect();
        let ey = nn::sinusoidal(&ys, quarter, 100.0);
        let ex = nn::sinusoidal(&xs, d - quarter, 100.0);
        let ef = nn::sinusoidal(&fs, d, 1000.0);
        let mut out = vec![0.0; frames * gh * gw * d];
        for f in 0..frames {
            for y in 0..gh {
                for x in 0..gw {
                    let base = ((f * gh + y) * gw + x) * d;
                    for k in 0..d {
                        let spatial = if k < quarter {
                            ey[y * quarter + k]
                        } else {
                            ex[x * (d - quarter) + k - quarter]
                        };
                        out[base + k] = spatial + ef[f * d + k];
                    }
                }
            }
        }
        Ok(Tensor::from_vec(out, (1, frames, gh * gw, d), &self.device)?.to_dtype(self.dtype)?)
    }

    fn time_embedding(&self, t: &[f64]) -> Result<Tensor> {
        let scaled: Vec<f64> = t.iter().map(|t| t * 1000.0).collect();
        let freqs = nn::sinusoidal(&scaled, TIME_FREQS, 10_000.0);
        let freqs = Tensor::from_vec(freqs, (t.len(), TIME_FREQS), &self.device)?
            .to_dtype(self.dtype)?;
        let h = self.time_fc1.forward(&freqs)?.silu()?;
        Ok(self.time_fc2.forward(&h)?.silu()?)
    }

    pub fn forward(&self, input: DenoiserInput<'_>) -> Result<DenoiserOutput> {
        let (b, c, f, h, w) = input.z_t.dims5()?;
        if c != LATENT_CHANNELS {
            return Err(invalid!("latent must have {LATENT_CHANNELS} channels, got {c}"));
        }
        if input.mask.dims() != [b, 1, f, h, w] {
            return Err(invalid!(
                "mask shape {:?} does not match latent grid [{b}, 1, {f}, {h}, {w}]",
                input.mask.dims()
            ));
        }
        if input.v_in.dims() != input.z_t.dims() {
            return Err(invalid!(
                "input video shape {:?} does not match latent {:?}",
                input.v_in.dims(),
                input.z_t.dims()
            ));
        }
        if input.t.len() != b {
            return Err(invalid!("{} flow times for batch {b}", input.t.len()));
        }
        if input.cond.frames() != f || input.cond.batch() != b {
            return Err(invalid!(
                "condition is [{}, {}] but latent is [{b}, {f}]",
                input.cond.batch(),
                input.cond.frames()
            ));
        }
        let grid = self.config.grid_for(h, w)?;
        let p = self.config.patch;
        let d = self.config.hidden;

        let stacked = Tensor::cat(&[input.z_t, input.mask, input.v_in], 1)?;
        let tokens = nn::patchify(&stacked, p)?; // [B, F, N, 7p²]
        let mut x = self
            .embed
            .forward(&tokens)?
            .broadcast_add(&self.positions(f, grid)?)?;

        let temb = self.time_embedding(input.t)?;
        let mut hidden = None;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, &temb, input.cond)?;
            if i + 1 == self.config.align_block {
                hidden = Some(x.clone());
            }
        }
        let hidden = hidden.ok_or_else(|| invalid!("alignment block was not reached"))?;

        let modulation = self.head_mod.forward(&temb)?.reshape((b, 1, 1, 2 * d))?;
        let shift = modulation.narrow(3, 0, d)?;
        let scale = (modulation.narrow(3, d, d)? + 1.0)?;
        let x = nn::layer_norm(&x, LN_EPS)?
            .broadcast_mul(&scale)?
            .broadcast_add(&shift)?;
        let out = nn::unpatchify(&self.head_out.forward(&x)?, LATENT_CHANNELS, grid, p)?;
        let velocity = match self.config.prediction {
            Prediction::Velocity => out,
            Prediction::CleanResidual => {
                let x0 = (input.v_in + out)?;
                let inv: Vec<f64> = input
                    .t
                    .iter()
                    .map(|&t| 1.0 / t.max(self.config.t_floor))
                    .collect();
                let inv = Tensor::from_vec(inv, (b, 1, 1, 1, 1), &self.device)?.to_dtype(self.dtype)?;
                (input.z_t - x0)?.broadcast_mul(&inv)?
            }
        };
        Ok(DenoiserOutput {
            velocity,
            hidden,
            grid,
        })
    }
}
