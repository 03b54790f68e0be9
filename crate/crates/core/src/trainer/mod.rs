//! Training objective, keyframe augmentation, the optimization loop and a
//! finite-difference gradient checker.
//!
//! The objective is the flow-matching velocity regression plus `lambda` times the
//! relation distillation term between the denoiser's alignment block and adapted
//! teacher features.

mod gradcheck;
mod run;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{noise_latent, velocity_target, Denoiser, DenoiserInput, LatentTensor};
use crate::error::{invalid, Result};
use crate::maskops::{diff_mask, side_effect_mask, to_token_mask, token_index_sets, TokenIndexSets};
use crate::nn;
use crate::relation::{
    adapt, oird_loss, relation_matrix, resample_to_grid, Adapter, TeacherEncoder, TokenFeatures,
};
use crate::video::{MaskTensor, VideoTensor};

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, ParamProbe, ToyProblem};
pub use run::{load_training_set, train, StepMetrics, TeacherSource, TrainOutcome, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the relation distillation term.
    pub lambda: f64,
    /// Difference-mask threshold.
    pub delta: f32,
    pub steps: usize,
    pub batch: usize,
    /// Peak AdamW learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warmup steps; the rate then decays on a cosine to `min_lr_ratio · lr`.
    pub warmup: usize,
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub kgp_augment: bool,
    /// Probability that a clip is keyframe-augmented when augmentation is on.
    pub kgp_prob: f64,
    /// Inclusive range of augmentation strides.
    pub stride_range: (usize, usize),
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            delta: crate::maskops::DEFAULT_DELTA,
            steps: 1000,
            batch: 1,
            lr: 1e-3,
            weight_decay: 0.0,
            warmup: 50,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            kgp_augment: true,
            kgp_prob: 0.5,
            stride_range: (2, 10),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(invalid!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.delta >= 0.0) {
            return Err(invalid!("delta must be non-negative, got {}", self.delta));
        }
        if self.batch == 0 {
            return Err(invalid!("batch must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid!("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.kgp_prob) {
            return Err(invalid!("kgp_prob {} outside [0, 1]", self.kgp_prob));
        }
        let (lo, hi) = self.stride_range;
        if lo < 2 || lo > hi {
            return Err(invalid!("stride range ({lo}, {hi}) must satisfy 2 <= lo <= hi"));
        }
        Ok(())
    }

    /// Learning rate at 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One training clip: input, target, object mask and teacher features of the input.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub v_ori: VideoTensor,
    pub v_gt: VideoTensor,
    pub m_obj: MaskTensor,
    pub teacher: TokenFeatures,
}

impl TrainSample {
    pub fn new(
        v_ori: VideoTensor,
        v_gt: VideoTensor,
        m_obj: MaskTensor,
        teacher: TokenFeatures,
    ) -> Result<Self> {
        if v_ori.dims() != v_gt.dims() {
            return Err(invalid!(
                "input {:?} and target {:?} differ in shape",
                v_ori.dims(),
                v_gt.dims()
            ));
        }
        m_obj.check_matches(&v_ori)?;
        if teacher.frames() != v_ori.frames() {
            return Err(invalid!(
                "teacher features cover {} frames, clip has {}",
                teacher.frames(),
                v_ori.frames()
            ));
        }
        Ok(Self {
            v_ori,
            v_gt,
            m_obj,
            teacher,
        })
    }

    pub fn from_encoder(
        v_ori: VideoTensor,
        v_gt: VideoTensor,
        m_obj: MaskTensor,
        encoder: &dyn TeacherEncoder,
    ) -> Result<Self> {
        let teacher = encoder.encode(&v_ori)?;
        Self::new(v_ori, v_gt, m_obj, teacher)
    }

    /// Object / side-effect token sets on `grid`.
    pub fn index_sets(&self, grid: (usize, usize), delta: f32) -> Result<TokenIndexSets> {
        let m_se = side_effect_mask(&diff_mask(&self.v_ori, &self.v_gt, delta)?, &self.m_obj)?;
        token_index_sets(&to_token_mask(&self.m_obj, grid)?, &to_token_mask(&m_se, grid)?)
    }
}

/// Keyframe augmentation with a fixed stride `n`: every frame `f ≡ 0 (mod n)` of the
/// input is replaced by the target frame and its mask is cleared. Targets are untouched.
pub fn kgp_augment_with_stride(sample: &TrainSample, n: usize) -> Result<TrainSample> {
    if n == 0 {
        return Err(invalid!("stride must be positive"));
    }
    let mut v_ori = sample.v_ori.clone();
    let mut m_obj = sample.m_obj.clone();
    for f in (0..v_ori.frames()).step_by(n) {
        v_ori.set_frame_from(f, &sample.v_gt, f);
        m_obj.clear_frame(f);
    }
    Ok(TrainSample {
        v_ori,
        m_obj,
        ..sample.clone()
    })
}

/// Draws `n` uniformly from `range` (inclusive) and applies [`kgp_augment_with_stride`].
pub fn kgp_augment<R: Rng + ?Sized>(
    sample: &TrainSample,
    range: (usize, usize),
    rng: &mut R,
) -> Result<(TrainSample, usize)> {
    if sample.v_ori.frames() < 2 {
        return Err(invalid!("keyframe augmentation needs at least 2 frames"));
    }
    if range.0 == 0 || range.0 > range.1 {
        return Err(invalid!("bad stride range {range:?}"));
    }
    let n = rng.random_range(range.0..=range.1);
    Ok((kgp_augment_with_stride(sample, n)?, n))
}

/// Fixed noise draws for one batch: `ε` shaped `[B, 3, F, H, W]` and one `t` per clip.
#[derive(Debug, Clone)]
pub struct FlowNoise {
    pub eps: Tensor,
    pub t: Vec<f64>,
}

impl FlowNoise {
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        batch: usize,
        dims: (usize, usize, usize),
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let (f, h, w) = dims;
        let eps = nn::randn(rng, &[batch, 3, f, h, w], dtype, device)?;
        let t = (0..batch).map(|_| rng.random_range(0.0..=1.0)).collect();
        Ok(Self { eps, t })
    }
}

/// Differentiable loss terms for one batch.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub flow: Tensor,
    pub oird: Tensor,
    /// Clips that had at least one frame with both object and side-effect tokens.
    pub oird_clips: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub flow: f64,
    pub oird: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn components(&self) -> Result<LossComponents> {
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossComponents {
            flow: scalar(&self.flow)?,
            oird: scalar(&self.oird)?,
            total: scalar(&self.total)?,
        })
    }
}

/// `mean ‖v − v̂‖² + λ · L_rel` for a batch of equally shaped clips.
///
/// The relation term is averaged over clips that have an active frame. With `λ = 0`
/// the returned total is the flow term itself.
pub fn total_loss(
    model: &Denoiser,
    adapter: &Adapter,
    batch: &[TrainSample],
    noise: &FlowNoise,
    lambda: f64,
    delta: f32,
) -> Result<LossTerms> {
    let first = batch.first().ok_or_else(|| invalid!("empty batch"))?;
    let dims = first.v_ori.dims();
    if batch.iter().any(|s| s.v_ori.dims() != dims) {
        return Err(invalid!("all clips in a batch must share one shape"));
    }
    if noise.t.len() != batch.len() {
        return Err(invalid!("{} noise levels for batch {}", noise.t.len(), batch.len()));
    }
    let (dtype, dev) = (model.dtype(), model.device());

    let stack = |f: &dyn Fn(&TrainSample) -> Result<Tensor>| -> Result<Tensor> {
        let parts = batch.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts, 0)?)
    };
    let z0 = LatentTensor::new(stack(&|s| {
        LatentTensor::encode(&s.v_gt, dtype, dev).map(LatentTensor::into_tensor)
    })?)?;
    let v_in = stack(&|s| LatentTensor::encode(&s.v_ori, dtype, dev).map(LatentTensor::into_tensor))?;
    let mask = stack(&|s| s.m_obj.to_tensor(dtype, dev))?;
    let eps = LatentTensor::new(noise.eps.clone())?;

    // Per-clip t: z_t = t ε + (1 − t) z0, built clip by clip.
    let z_t = (0..batch.len())
        .map(|b| {
            let z = LatentTensor::new(z0.data().get(b)?)?;
            let e = LatentTensor::new(eps.data().get(b)?)?;
            Ok(noise_latent(&z, &e, noise.t[b])?.into_tensor())
        })
        .collect::<Result<Vec<_>>>()?;
    let z_t = Tensor::stack(&z_t, 0)?;
    let target = velocity_target(&z0, &eps)?.into_tensor();

    let conds = batch
        .iter()
        .map(|s| model.condition(&s.v_ori, &s.m_obj))
        .collect::<Result<Vec<_>>>()?;
    let cond = crate::denoiser::ConditionSequence::stack(&conds)?;

    let out = model.forward(DenoiserInput {
        z_t: &z_t,
        t: &noise.t,
        mask: &mask,
        v_in: &v_in,
        cond: &cond,
    })?;
    let flow = (&out.velocity - target)?.sqr()?.mean_all()?;

    let mut oird_sum: Option<Tensor> = None;
    let mut oird_clips = 0;
    for (b, sample) in batch.iter().enumerate() {
        let student = out.hidden_features(b)?;
        let sets = sample.index_sets(student.grid(), delta)?;
        if sets.active_frames() == 0 {
            continue;
        }
        let teacher = resample_to_grid(&sample.teacher.to_dtype(dtype)?, student.grid())?;
        let adapted = adapt(adapter, &teacher)?;
        let loss = oird_loss(&relation_matrix(&student)?, &relation_matrix(&adapted)?, &sets)?;
        oird_sum = Some(match oird_sum {
            Some(s) => (s + loss.value)?,
            None => loss.value,
        });
        oird_clips += 1;
    }
    let oird = match oird_sum {
        Some(s) => (s / oird_clips as f64)?,
        None => Tensor::zeros((), dtype, dev)?,
    };
    let total = if lambda == 0.0 {
        flow.clone()
    } else {
        (&flow + (&oird * lambda)?)?
    };
    Ok(LossTerms {
        total,
        flow,
        oird,
        oird_clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DiTConfig;
    use crate::nn::VarStore;
    use crate::relation::FrozenPatchEncoder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(super) fn toy_sample(f: usize, h: usize, w: usize, enc: &FrozenPatchEncoder) -> TrainSample {
        let m_obj = MaskTensor::from_fn(f, h, w, |t, y, x| (2..6).contains(&y) && (t..t + 4).contains(&x));
        let shadow = |t: usize, y: usize, x: usize| (6..9).contains(&y) && (t + 1..t + 5).contains(&x);
        let bg = |c: usize, y: usize, x: usize| 0.4 + 0.05 * c as f32 + 0.02 * ((x + y) % 5) as f32;
        let v_gt = VideoTensor::from_fn(f, h, w, |c, _, y, x| bg(c, y, x)).unwrap();
        let v_ori = VideoTensor::from_fn(f, h, w, |c, t, y, x| {
            if m_obj.get(t, y, x) {
                0.1
            } else if shadow(t, y, x) {
                bg(c, y, x) * 0.4
            } else {
                bg(c, y, x)
            }
        })
        .unwrap();
        TrainSample::from_encoder(v_ori, v_gt, m_obj, enc).unwrap()
    }

    pub(super) fn toy_model(dtype: DType, seed: u64) -> (Denoiser, Adapter, VarStore, FrozenPatchEncoder) {
        let cfg = DiTConfig {
            vision_patch: 4,
            vision_dim: 8,
            zero_init_head: false,
            prompt_tokens: 2,
            mlp_ratio: 2,
            ..DiTConfig::with_depth(2, 16, 2, 4)
        };
        let mut vs = VarStore::new(dtype, &Device::Cpu, seed);
        let model = Denoiser::new(&cfg, &mut vs).unwrap();
        let teacher = FrozenPatchEncoder::new(4, 12, 99).unwrap();
        let adapter = Adapter::new(&mut vs, "adapter", 12, 16).unwrap();
        (model, adapter, vs, teacher)
    }

    #[test]
    fn augment_rule() {
        let enc = FrozenPatchEncoder::new(4, 8, 1).unwrap();
        let s = toy_sample(4, 12, 12, &enc);
        let a = kgp_augment_with_stride(&s, 2).unwrap();
        for f in 0..4 {
            if f % 2 == 0 {
                assert_eq!(a.v_ori.frame(f), s.v_gt.frame(f));
                assert!((0..12).all(|y| (0..12).all(|x| !a.m_obj.get(f, y, x))));
            } else {
                assert_eq!(a.v_ori.frame(f), s.v_ori.frame(f));
                assert_eq!(a.m_obj.data().index_axis(ndarray::Axis(0), f), s.m_obj.data().index_axis(ndarray::Axis(0), f));
            }
        }
        assert_eq!(a.v_gt, s.v_gt);
        // stride beyond the clip: only frame 0 is a keyframe
        let b = kgp_augment_with_stride(&s, 9).unwrap();
        assert_eq!(b.v_ori.frame(0), s.v_gt.frame(0));
        for f in 1..4 {
            assert_eq!(b.v_ori.frame(f), s.v_ori.frame(f));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (_, n) = kgp_augment(&s, (2, 10), &mut rng).unwrap();
            assert!((2..=10).contains(&n));
        }
    }

    #[test]
    fn lambda_zero_is_flow_only() {
        let (model, adapter, _, enc) = toy_model(DType::F64, 0);
        let s = toy_sample(2, 12, 12, &enc);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = FlowNoise::draw(&mut rng, 1, s.v_ori.dims(), DType::F64, &Device::Cpu).unwrap();
        let l0 = total_loss(&model, &adapter, &[s.clone()], &noise, 0.0, 0.1).unwrap();
        let c = l0.components().unwrap();
        assert_eq!(c.total.to_bits(), c.flow.to_bits());
        assert!(l0.oird_clips == 1 && c.oird > 0.0);

        let l1 = total_loss(&model, &adapter, &[s], &noise, 0.1, 0.1).unwrap();
        let c1 = l1.components().unwrap();
        assert_eq!(c1.flow, c.flow);
        assert!((c1.total - (c1.flow + 0.1 * c1.oird)).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig {
            steps: 100,
            warmup: 10,
            lr: 1.0,
            min_lr_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(100) - 0.1).abs() < 1e-12);
        assert!(TrainConfig { lambda: -1.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { stride_range: (1, 4), ..cfg }.validate().is_err());
    }
}
