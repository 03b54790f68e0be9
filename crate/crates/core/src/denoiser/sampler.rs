use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{Denoiser, DenoiserInput};
use super::LatentTensor;
use crate::error::{invalid, Result};
use crate::nn;
use crate::video::{MaskTensor, VideoTensor};

pub const DEFAULT_SAMPLE_STEPS: usize = 20;

/// Anything that turns `(V_ori, M_obj)` into an edited clip of the same shape.
pub trait Remover: Send + Sync {
    fn remove(&self, v_ori: &VideoTensor, m_obj: &MaskTensor, seed: u64) -> Result<VideoTensor>;
}

/// Euler integration of the learned velocity field from pure noise at `t = 1` down to
/// `t = 0`. The output is the decoded latent; masked and unmasked pixels are both
/// generated, nothing is pasted back from the input.
pub fn sample(
    model: &Denoiser,
    v_ori: &VideoTensor,
    m_obj: &MaskTensor,
    steps: usize,
    seed: u64,
) -> Result<VideoTensor> {
    if steps == 0 {
        return Err(invalid!("sampler needs at least one step"));
    }
    m_obj.check_matches(v_ori)?;
    let (dtype, dev) = (model.dtype(), model.device());
    let v_in = LatentTensor::encode(v_ori, dtype, dev)?.into_tensor().unsqueeze(0)?;
    let mask = m_obj.to_tensor(dtype, dev)?.unsqueeze(0)?;
    let cond = model.condition(v_ori, m_obj)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = nn::randn(&mut rng, v_in.dims(), dtype, dev)?;
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let out = model.forward(DenoiserInput {
            z_t: &z,
            t: &[t],
            mask: &mask,
            v_in: &v_in,
            cond: &cond,
        })?;
        z = (z - (out.velocity * dt)?)?.detach();
    }
    LatentTensor::new(z)?.decode()
}

/// A trained [`Denoiser`] plus its sampling schedule.
#[derive(Debug, Clone)]
pub struct DiffusionRemover {
    pub model: Denoiser,
    pub steps: usize,
}

impl DiffusionRemover {
    pub fn new(model: Denoiser, steps: usize) -> Self {
        Self { model, steps }
    }
}

impl Remover for DiffusionRemover {
    fn remove(&self, v_ori: &VideoTensor, m_obj: &MaskTensor, seed: u64) -> Result<VideoTensor> {
        sample(&self.model, v_ori, m_obj, self.steps, seed)
    }
}
