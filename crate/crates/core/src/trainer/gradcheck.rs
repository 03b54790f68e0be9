use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{total_loss, FlowNoise, TrainSample};
use crate::denoiser::{DiTConfig, Denoiser};
use crate::error::{invalid, Error, Result};
use crate::nn::VarStore;
use crate::relation::{Adapter, FrozenPatchEncoder};
use crate::synthdata::{generate_pair, Background, Motion, ObjectKind, SceneSpec, SideEffect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub probes: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that parameters with vanishing
    /// gradients are compared absolutely.
    pub floor: f64,
    pub max_params: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 50,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_params: 50_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamProbe {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trainable_params: usize,
    /// Frozen tensors that were confirmed to receive no gradient.
    pub frozen: Vec<String>,
    pub probes: Vec<ParamProbe>,
    pub max_rel_error: f64,
    pub worst_parameter: String,
}

/// A small 64-bit model and one shadow clip, sized for finite differences.
pub struct ToyProblem {
    pub model: Denoiser,
    pub adapter: Adapter,
    pub vs: VarStore,
    pub batch: Vec<TrainSample>,
    pub noise: FlowNoise,
}

impl ToyProblem {
    pub fn new(seed: u64) -> Result<Self> {
        let dit = DiTConfig {
            vision_patch: 4,
            vision_dim: 8,
            prompt_tokens: 2,
            mlp_ratio: 2,
            zero_init_head: false,
            ..DiTConfig::with_depth(2, 16, 2, 4)
        };
        let mut vs = VarStore::new(DType::F64, &candle_core::Device::Cpu, seed);
        let model = Denoiser::new(&dit, &mut vs)?;
        let teacher = FrozenPatchEncoder::new(4, 12, seed ^ 0x7eac_4e55)?;
        let adapter = Adapter::new(&mut vs, "adapter", 12, dit.hidden)?;
        let pair = generate_pair(&SceneSpec {
            resolution: (16, 16),
            frames: 2,
            object_kind: ObjectKind::Square,
            object_radius: 3.0,
            motion: Motion {
                start: (6.0, 6.0),
                velocity: (0.0, 1.0),
            },
            side_effect: SideEffect::Shadow,
            shadow_offset: (4, 3),
            shadow_opacity: 0.6,
            background: Background::Gradient,
            seed,
        })?;
        let batch = vec![TrainSample::from_encoder(pair.v_ori, pair.v_gt, pair.m_obj, &teacher)?];
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let noise = FlowNoise::draw(&mut rng, 1, (2, 16, 16), DType::F64, vs.device())?;
        Ok(Self {
            model,
            adapter,
            vs,
            batch,
            noise,
        })
    }

    pub fn check(&self, lambda: f64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        gradient_check(
            &self.model,
            &self.adapter,
            &self.vs,
            &self.batch,
            &self.noise,
            lambda,
            crate::maskops::DEFAULT_DELTA,
            cfg,
        )
    }
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?)
}

/// Compares the analytic gradient of [`total_loss`] with central finite differences on
/// randomly chosen scalar parameters. The store must be 64-bit and `noise` is held fixed
/// across evaluations. Fails with [`Error::GradientCheck`] when the worst relative error
/// `|a − n| / max(|a|, |n|, floor)` exceeds the tolerance.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &Denoiser,
    adapter: &Adapter,
    vs: &VarStore,
    batch: &[TrainSample],
    noise: &FlowNoise,
    lambda: f64,
    delta: f32,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if vs.dtype() != DType::F64 {
        return Err(invalid!("gradient check needs 64-bit parameters"));
    }
    let total = vs.num_params();
    if total > cfg.max_params {
        return Err(invalid!(
            "model has {total} parameters, gradient check is limited to {}",
            cfg.max_params
        ));
    }
    let loss = || -> Result<f64> {
        let t = total_loss(model, adapter, batch, noise, lambda, delta)?.total;
        Ok(t.to_scalar::<f64>()?)
    };

    let terms = total_loss(model, adapter, batch, noise, lambda, delta)?;
    let grads = terms.total.backward()?;

    let enc = model.vision_encoder();
    let mut frozen = Vec::new();
    for (name, t) in [("vision_encoder.weight", enc.weight()), ("vision_encoder.bias", enc.bias())] {
        if grads.get(t).is_some() {
            return Err(invalid!("frozen tensor {name} received a gradient"));
        }
        frozen.push(name.to_string());
    }
    for (i, s) in batch.iter().enumerate() {
        if grads.get(s.teacher.data()).is_some() {
            return Err(invalid!("teacher features of clip {i} received a gradient"));
        }
        frozen.push(format!("teacher_features[{i}]"));
    }

    let names = vs.names();
    let sizes: Vec<usize> = names
        .iter()
        .map(|n| vs.var(n).map(|v| v.elem_count()).unwrap_or(0))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probes = Vec::with_capacity(cfg.probes);
    for _ in 0..cfg.probes {
        let mut pick = rng.random_range(0..total);
        let mut which = 0;
        while pick >= sizes[which] {
            pick -= sizes[which];
            which += 1;
        }
        let name = &names[which];
        let var = vs.var(name).expect("name from store");
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g)?[pick],
            None => 0.0,
        };
        let original = flat(var.as_tensor())?;
        let shape = var.as_tensor().shape().clone();
        let device = var.as_tensor().device().clone();
        let eval_at = |value: f64| -> Result<f64> {
            let mut v = original.clone();
            v[pick] = value;
            var.set(&Tensor::from_vec(v, shape.clone(), &device)?)?;
            loss()
        };
        let x = original[pick];
        let plus = eval_at(x + cfg.step)?;
        let minus = eval_at(x - cfg.step)?;
        var.set(&Tensor::from_vec(original.clone(), shape.clone(), &device)?)?;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        probes.push(ParamProbe {
            parameter: name.clone(),
            index: pick,
            analytic,
            numeric,
            rel_error,
        });
    }
    let worst = probes
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .ok_or_else(|| invalid!("no probes requested"))?;
    let report = GradCheckReport {
        trainable_params: total,
        frozen,
        max_rel_error: worst.rel_error,
        worst_parameter: format!("{}[{}]", worst.parameter, worst.index),
        probes: probes.clone(),
    };
    if !(report.max_rel_error <= cfg.tolerance) {
        return Err(Error::GradientCheck {
            parameter: report.worst_parameter.clone(),
            worst_rel_error: report.max_rel_error,
        });
    }
    Ok(report)
}
