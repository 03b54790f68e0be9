use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{kgp_augment, total_loss, FlowNoise, TrainConfig, TrainSample};
use crate::denoiser::{save_checkpoint, DiTConfig, Denoiser};
use crate::error::{invalid, Error, Result};
use crate::nn::VarStore;
use crate::relation::{load_external_features, Adapter, TeacherEncoder};
use crate::video::{load_clip, load_mask, ClipManifest};

/// Where teacher features come from.
pub enum TeacherSource<'a> {
    Encoder(&'a dyn TeacherEncoder),
    /// Precomputed `<dir>/<clip_id>.safetensors` files.
    External(PathBuf),
}

/// Loads every manifest entry with its target frames and teacher features.
pub fn load_training_set(manifest: &ClipManifest, teacher: &TeacherSource<'_>) -> Result<Vec<TrainSample>> {
    if manifest.entries.is_empty() {
        return Err(invalid!("training manifest is empty"));
    }
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let gt_dir = e
                .gt
                .as_ref()
                .ok_or_else(|| invalid!("clip {} has no ground truth", e.clip_id()))?;
            let (v_ori, _) = load_clip(&e.input)?;
            let (v_gt, _) = load_clip(gt_dir)?;
            let m_obj = load_mask(&e.mask)?;
            match teacher {
                TeacherSource::Encoder(enc) => TrainSample::from_encoder(v_ori, v_gt, m_obj, *enc),
                TeacherSource::External(dir) => {
                    let feat = load_external_features(dir, &e.clip_id())?;
                    TrainSample::new(v_ori, v_gt, m_obj, feat)
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub flow: f64,
    pub oird: f64,
    pub total: f64,
}

/// Model, adapter and optimizer state for one run.
pub struct Trainer {
    pub dit: DiTConfig,
    pub cfg: TrainConfig,
    pub model: Denoiser,
    pub adapter: Adapter,
    pub vs: VarStore,
    opt: AdamW,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    /// `teacher_dim` is the width of the teacher features fed to the adapter.
    pub fn new(dit: &DiTConfig, cfg: &TrainConfig, teacher_dim: usize, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut vs = VarStore::new(dtype, &Device::Cpu, cfg.seed);
        let model = Denoiser::new(dit, &mut vs)?;
        let adapter = Adapter::new(&mut vs, "adapter", teacher_dim, dit.hidden)?;
        let opt = AdamW::new(
            vs.all_vars(),
            ParamsAdamW {
                lr: cfg.lr_at(0),
                weight_decay: cfg.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            dit: dit.clone(),
            cfg: cfg.clone(),
            model,
            adapter,
            vs,
            opt,
            // Separate stream from parameter init so data order does not depend on model size.
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a_0bde_0000_0001),
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn next_batch(&mut self, data: &[TrainSample]) -> Result<Vec<TrainSample>> {
        let mut batch = Vec::with_capacity(self.cfg.batch);
        while batch.len() < self.cfg.batch {
            if self.cursor >= self.order.len() {
                self.order = (0..data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let sample = &data[self.order[self.cursor]];
            self.cursor += 1;
            let augment = self.cfg.kgp_augment && self.rng.random_bool(self.cfg.kgp_prob);
            batch.push(if augment {
                kgp_augment(sample, self.cfg.stride_range, &mut self.rng)?.0
            } else {
                sample.clone()
            });
        }
        Ok(batch)
    }

    /// One optimization step. Fails with [`Error::Divergence`] on a non-finite loss,
    /// before any parameter is touched.
    pub fn train_step(&mut self, data: &[TrainSample]) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(invalid!("no training samples"));
        }
        let batch = self.next_batch(data)?;
        let noise = FlowNoise::draw(
            &mut self.rng,
            batch.len(),
            batch[0].v_ori.dims(),
            self.vs.dtype(),
            self.vs.device(),
        )?;
        let terms = total_loss(&self.model, &self.adapter, &batch, &noise, self.cfg.lambda, self.cfg.delta)?;
        let c = terms.components()?;
        let step = self.step + 1;
        for (what, v) in [("flow", c.flow), ("oird", c.oird), ("total", c.total)] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: format!("{what} loss is {v}"),
                });
            }
        }
        let mut grads = terms.total.backward()?;
        if self.cfg.grad_clip > 0.0 {
            let mut sq = 0.0;
            for var in self.vs.all_vars() {
                if let Some(g) = grads.get(var.as_tensor()) {
                    sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                }
            }
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: format!("gradient norm is {norm}"),
                });
            }
            if norm > self.cfg.grad_clip {
                let scale = self.cfg.grad_clip / norm;
                for var in self.vs.all_vars() {
                    if let Some(g) = grads.remove(var.as_tensor()) {
                        grads.insert(var.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.opt.set_learning_rate(self.cfg.lr_at(self.step));
        self.opt.step(&grads)?;
        self.step = step;
        Ok(StepMetrics {
            step,
            flow: c.flow,
            oird: c.oird,
            total: c.total,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.vs, &self.dit, Some(self.step as u64))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
}

/// Runs `cfg.steps` steps, appending one JSON line per step to `metrics_log` and saving
/// the final (and periodic) checkpoints to `checkpoint`. On divergence the last good
/// parameters are saved before the error is returned.
pub fn train(
    data: &[TrainSample],
    dit: &DiTConfig,
    cfg: &TrainConfig,
    checkpoint: impl AsRef<Path>,
    metrics_log: Option<&Path>,
) -> Result<TrainOutcome> {
    let first = data.first().ok_or_else(|| invalid!("no training samples"))?;
    let checkpoint = checkpoint.as_ref().to_path_buf();
    let mut trainer = Trainer::new(dit, cfg, first.teacher.dim(), DType::F32)?;
    let mut log = match metrics_log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let m = match trainer.train_step(data) {
            Ok(m) => m,
            Err(e @ Error::Divergence { .. }) => {
                trainer.save(&checkpoint)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let (Some(f), Some(p)) = (log.as_mut(), metrics_log) {
            writeln!(f, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(p, e))?;
        }
        if m.step % 100 == 0 || m.step == 1 {
            log::info!(
                "step {} flow {:.5} oird {:.5} total {:.5}",
                m.step,
                m.flow,
                m.oird,
                m.total
            );
        }
        metrics.push(m);
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            trainer.save(&checkpoint)?;
        }
    }
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome {
        metrics,
        checkpoint,
    })
}
