//! Multi-head self / cross attention and framewise context cross-attention.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{invalid, Result};
use crate::nn::{Dense, Init, VarStore};
use crate::relation::TeacherEncoder;
use crate::video::{MaskTensor, VideoTensor};

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (s, l, d) = x.dims3()?;
    Ok(x
        .reshape((s, l, heads, d / heads))?
        .transpose(1, 2)?
        .contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (s, h, l, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((s, l, h * dh))?)
}

/// softmax(q kᵀ / sqrt(d_h)) v over `[S, H, L, d_h]` inputs.
fn scaled_dot_product(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dh = q.dims()[3];
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(weights.matmul(v)?)
}

/// Self-attention over the middle axis of `[S, L, D]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Dense,
    out: Dense,
    heads: usize,
}

impl SelfAttention {
    pub fn new(vs: &mut VarStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Dense::new(vs, &format!("{prefix}.qkv"), dim, 3 * dim)?,
            out: Dense::new(vs, &format!("{prefix}.out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dims3()?.2;
        let qkv = self.qkv.forward(x)?;
        let q = split_heads(&qkv.narrow(D::Minus1, 0, d)?, self.heads)?;
        let k = split_heads(&qkv.narrow(D::Minus1, d, d)?, self.heads)?;
        let v = split_heads(&qkv.narrow(D::Minus1, 2 * d, d)?, self.heads)?;
        self.out.forward(&merge_heads(&scaled_dot_product(&q, &k, &v)?)?)
    }
}

/// Standard cross-attention: queries `[S, N, D]` attend to a context `[S, T, D_c]`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(
        vs: &mut VarStore,
        prefix: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Dense::new(vs, &format!("{prefix}.q"), dim, dim)?,
            k: Dense::new(vs, &format!("{prefix}.k"), context_dim, dim)?,
            v: Dense::new(vs, &format!("{prefix}.v"), context_dim, dim)?,
            out: Dense::new(vs, &format!("{prefix}.out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (s, _, _) = x.dims3()?;
        let (sc, _, _) = context.dims3()?;
        if s != sc {
            return Err(invalid!("cross-attention batch {s} vs context batch {sc}"));
        }
        let q = split_heads(&self.q.forward(x)?, self.heads)?;
        let k = split_heads(&self.k.forward(context)?, self.heads)?;
        let v = split_heads(&self.v.forward(context)?, self.heads)?;
        self.out.forward(&merge_heads(&scaled_dot_product(&q, &k, &v)?)?)
    }
}

/// Cross-attention context: shared prompt tokens `[T_p, D_c]` and per-frame background
/// tokens `[B, F, T_v, D_c]`.
#[derive(Debug, Clone)]
pub struct ConditionSequence {
    pub prompt_tokens: Tensor,
    pub background_tokens: Tensor,
}

impl ConditionSequence {
    pub fn new(prompt_tokens: Tensor, background_tokens: Tensor) -> Result<Self> {
        let (tp, dp) = prompt_tokens.dims2()?;
        let (_, _, _, dc) = background_tokens.dims4()?;
        if tp == 0 {
            return Err(invalid!("condition needs at least one prompt token"));
        }
        if dp != dc {
            return Err(invalid!("prompt width {dp} differs from background width {dc}"));
        }
        Ok(Self {
            prompt_tokens,
            background_tokens,
        })
    }

    pub fn batch(&self) -> usize {
        self.background_tokens.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.background_tokens.dims()[1]
    }

    /// Concatenates single-clip conditions along the batch axis. Prompt tokens are
    /// taken from the first entry.
    pub fn stack(conds: &[ConditionSequence]) -> Result<Self> {
        let first = conds.first().ok_or_else(|| invalid!("no conditions to stack"))?;
        let bg: Vec<&Tensor> = conds.iter().map(|c| &c.background_tokens).collect();
        Self::new(first.prompt_tokens.clone(), Tensor::cat(&bg, 0)?)
    }

    /// Frame `f` of every batch entry, as a `[B, 1, T_v, D_c]` condition.
    pub fn select_frame(&self, f: usize) -> Result<Self> {
        Self::new(
            self.prompt_tokens.clone(),
            self.background_tokens.narrow(1, f, 1)?,
        )
    }

    /// `[(B·F), T_p + T_v, D_c]`: prompt tokens ahead of each frame's background tokens.
    pub fn merged_context(&self) -> Result<Tensor> {
        let (b, f, tv, dc) = self.background_tokens.dims4()?;
        let tp = self.prompt_tokens.dims()[0];
        let prompt = self
            .prompt_tokens
            .unsqueeze(0)?
            .broadcast_as((b * f, tp, dc))?
            .contiguous()?;
        let bg = self.background_tokens.reshape((b * f, tv, dc))?;
        Ok(Tensor::cat(&[&prompt, &bg], 1)?)
    }
}

/// Framewise context cross-attention: `[B, F, N, D]` latents are merged to
/// `[(B·F), N, D]` so that each frame attends only to its own background tokens plus
/// the shared prompt, then reshaped back.
pub fn framewise_cross_attention(
    latent_tokens: &Tensor,
    cond: &ConditionSequence,
    attn: &CrossAttention,
) -> Result<Tensor> {
    let (b, f, n, d) = latent_tokens.dims4()?;
    if cond.frames() != f {
        return Err(invalid!(
            "latents have {f} frames, condition has {}",
            cond.frames()
        ));
    }
    if cond.batch() != b {
        return Err(invalid!(
            "latents have batch {b}, condition has {}",
            cond.batch()
        ));
    }
    let x = latent_tokens.reshape((b * f, n, d))?;
    let out = attn.forward(&x, &cond.merged_context()?)?;
    Ok(out.reshape((b, f, n, d))?)
}

/// Trainable map `l_θ` from background-encoder features to the condition width, plus the
/// learned empty-prompt embedding.
#[derive(Debug, Clone)]
pub struct ConditionProjector {
    pub prompt: Tensor,
    fc1: Dense,
    fc2: Dense,
}

impl ConditionProjector {
    pub fn new(
        vs: &mut VarStore,
        prefix: &str,
        vision_dim: usize,
        dim: usize,
        prompt_tokens: usize,
    ) -> Result<Self> {
        Ok(Self {
            prompt: vs.get(&format!("{prefix}.prompt"), &[prompt_tokens, dim], Init::Normal(1.0))?,
            fc1: Dense::new(vs, &format!("{prefix}.fc1"), vision_dim, dim)?,
            fc2: Dense::new(vs, &format!("{prefix}.fc2"), dim, dim)?,
        })
    }

    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(features)?.gelu()?)
    }
}

/// `c = [τ(""), l_θ(ν(V_ori ⊙ (1 − M_obj)))]` for one clip (batch of one). The masked
/// region is zeroed before encoding, so pixels under the mask never reach the context.
pub fn build_condition(
    prompt_embed: &Tensor,
    v_ori: &VideoTensor,
    m_obj: &MaskTensor,
    vision_enc: &dyn TeacherEncoder,
    proj: &ConditionProjector,
    dtype: DType,
    device: &Device,
) -> Result<ConditionSequence> {
    let background = v_ori.masked_out(m_obj)?;
    let feats = vision_enc.encode(&background)?;
    let tokens = proj.project(&feats.data().to_dtype(dtype)?.to_device(device)?)?;
    ConditionSequence::new(prompt_embed.clone(), tokens.unsqueeze(0)?)
}
