//! Checkpoints are a single safetensors file holding every parameter of the store
//! plus the model configuration as JSON metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};

use super::model::Denoiser;
use super::DiTConfig;
use crate::error::{invalid, Error, Result};
use crate::nn::VarStore;

pub const CHECKPOINT_FORMAT_VERSION: &str = "1";
const FORMAT_TAG: &str = "erasure-checkpoint";

/// Writes all parameters of `vs`. `step` is recorded when given. The file is written
/// to a temporary sibling first and renamed, so a crash never leaves a torn checkpoint.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    vs: &VarStore,
    config: &DiTConfig,
    step: Option<u64>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut meta = HashMap::from([
        ("format".to_string(), FORMAT_TAG.to_string()),
        ("format_version".to_string(), CHECKPOINT_FORMAT_VERSION.to_string()),
        ("config".to_string(), serde_json::to_string(config)?),
    ]);
    if let Some(step) = step {
        meta.insert("step".to_string(), step.to_string());
    }
    let tensors = vs
        .vars()
        .map(|(name, var)| Ok((name.clone(), var.as_tensor().contiguous()?)))
        .collect::<Result<Vec<_>>>()?;
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(tensors, Some(meta), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A loaded checkpoint: configuration, optional training step, and a parameter store
/// from which [`Denoiser::new`] rebuilds the model without re-initializing anything.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: DiTConfig,
    pub step: Option<u64>,
    pub store: VarStore,
}

impl Checkpoint {
    pub fn into_model(mut self) -> Result<(Denoiser, VarStore)> {
        let model = Denoiser::new(&self.config, &mut self.store)?;
        Ok((model, self.store))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let version = meta.get("format_version").map(String::as_str).unwrap_or("");
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version:?}",
            path.display()
        )));
    }
    let config: DiTConfig = serde_json::from_str(
        meta.get("config")
            .ok_or_else(|| invalid!("{}: missing config metadata", path.display()))?,
    )?;
    config.validate()?;
    let step = meta.get("step").and_then(|s| s.parse().ok());
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let mut store = VarStore::new(dtype, device, 0);
    for (name, t) in &tensors {
        store.insert(name, t)?;
    }
    Ok(Checkpoint {
        config,
        step,
        store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserInput, LatentTensor};
    use crate::video::{MaskTensor, VideoTensor};

    #[test]
    fn round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DiTConfig {
            vision_patch: 4,
            vision_dim: 8,
            zero_init_head: false,
            ..DiTConfig::with_depth(2, 16, 2, 4)
        };
        let mut vs = VarStore::new(DType::F32, &Device::Cpu, 11);
        let model = Denoiser::new(&cfg, &mut vs).unwrap();
        let path = dir.path().join("sub/model.safetensors");
        save_checkpoint(&path, &vs, &cfg, Some(42)).unwrap();

        let ck = load_checkpoint(&path, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.step, Some(42));
        let (loaded, store) = ck.into_model().unwrap();
        assert_eq!(store.num_params(), vs.num_params());

        let v = VideoTensor::from_fn(2, 8, 8, |c, f, y, x| ((c * 3 + f + y + x) % 7) as f32 / 7.0).unwrap();
        let m = MaskTensor::from_fn(2, 8, 8, |_, y, _| y < 4);
        let run = |net: &Denoiser| {
            let z = LatentTensor::encode(&v, DType::F32, &Device::Cpu).unwrap().into_tensor().unsqueeze(0).unwrap();
            let mask = m.to_tensor(DType::F32, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
            let cond = net.condition(&v, &m).unwrap();
            net.forward(DenoiserInput { z_t: &z, t: &[0.4], mask: &mask, v_in: &z, cond: &cond })
                .unwrap()
                .velocity
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        assert_eq!(run(&model), run(&loaded));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let t = candle_core::Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        safetensors::serialize_to_file([("a", &t)], None, &path).unwrap();
        assert!(load_checkpoint(&path, DType::F32, &Device::Cpu).is_err());
        assert!(load_checkpoint(dir.path().join("missing"), DType::F32, &Device::Cpu).is_err());
    }
}
