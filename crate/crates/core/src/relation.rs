//! Teacher features, the trainable adapter, per-frame cosine relation matrices and
//! the object-induced relation distillation loss.

use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::maskops::TokenIndexSets;
use crate::nn::{self, Dense, Init, VarStore};
use crate::video::VideoTensor;

/// Token norms below this are rejected by [`relation_matrix`].
pub const MIN_TOKEN_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    StudentHidden,
    TeacherRaw,
    TeacherAdapted,
}

/// Per-frame token embeddings `[F, N, D]` on an `h_tok x w_tok` grid.
#[derive(Debug, Clone)]
pub struct TokenFeatures {
    data: Tensor,
    grid: (usize, usize),
    source: FeatureSource,
}

impl TokenFeatures {
    pub fn new(data: Tensor, grid: (usize, usize), source: FeatureSource) -> Result<Self> {
        let (_, n, _) = data.dims3()?;
        if n != grid.0 * grid.1 {
            return Err(invalid!(
                "{n} tokens per frame do not fit grid {grid:?}"
            ));
        }
        Ok(Self { data, grid, source })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn tokens(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            data: self.data.to_dtype(dtype)?,
            ..self.clone()
        })
    }

    /// Cuts every gradient path into these features.
    pub fn detach(&self) -> Self {
        Self {
            data: self.data.detach(),
            ..self.clone()
        }
    }
}

/// A frozen feature extractor applied independently to each frame.
pub trait TeacherEncoder: Send + Sync {
    fn encode(&self, video: &VideoTensor) -> Result<TokenFeatures>;
    /// Embedding width.
    fn dim(&self) -> usize;
    /// Token grid produced for `height x width` frames.
    fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)>;
}

/// Seeded random patch projection followed by layer normalization.
///
/// Each `p x p` RGB patch is flattened `(c, dy, dx)`, mapped through a fixed affine
/// map and normalized. Nothing here is trainable; outputs carry no gradient.
#[derive(Debug, Clone)]
pub struct FrozenPatchEncoder {
    patch: usize,
    weight: Tensor,
    bias: Tensor,
}

impl FrozenPatchEncoder {
    pub const LN_EPS: f64 = 1e-5;

    pub fn new(patch: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || dim == 0 {
            return Err(invalid!("patch and dim must be positive"));
        }
        let in_dim = 3 * patch * patch;
        let mut vs = VarStore::new(DType::F32, &Device::Cpu, seed);
        let weight = vs.get("weight", &[in_dim, dim], Init::Normal(1.0 / (in_dim as f64).sqrt()))?;
        let bias = vs.get("bias", &[dim], Init::Normal(1.0))?;
        Ok(Self {
            patch,
            weight: weight.detach(),
            bias: bias.detach(),
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

impl TeacherEncoder for FrozenPatchEncoder {
    fn encode(&self, video: &VideoTensor) -> Result<TokenFeatures> {
        let (_, h, w) = video.dims();
        let grid = self.grid_for(h, w)?;
        let x = video.to_tensor(DType::F32, &Device::Cpu)?.unsqueeze(0)?;
        let patches = nn::patchify(&x, self.patch)?.squeeze(0)?; // [F, N, 3p²]
        let (f, n, k) = patches.dims3()?;
        let proj = patches
            .reshape((f * n, k))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?
            .reshape((f, n, self.dim()))?;
        let out = nn::layer_norm(&proj, Self::LN_EPS)?;
        TokenFeatures::new(out.detach(), grid, FeatureSource::TeacherRaw)
    }

    fn dim(&self) -> usize {
        self.weight.dims()[1]
    }

    fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height % self.patch != 0 || width % self.patch != 0 {
            return Err(invalid!(
                "{height}x{width} frames are not divisible by teacher patch {}",
                self.patch
            ));
        }
        Ok((height / self.patch, width / self.patch))
    }
}

/// Teacher features for the clip `v_ori`. Each frame is encoded on its own, so a
/// frame's features depend only on that frame.
pub fn encode_teacher(enc: &dyn TeacherEncoder, v_ori: &VideoTensor) -> Result<TokenFeatures> {
    enc.encode(v_ori)
}

fn bilinear_weights(n_out: usize, n_in: usize) -> Vec<Vec<(usize, f64)>> {
    // Half-pixel centres (align_corners = false), clamped at the borders.
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = src - lo as f64;
            if hi == lo {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - frac), (hi, frac)]
            }
        })
        .collect()
}

/// Interpolation matrix `[N_out, N_in]` mapping a row-major `grid_in` onto `grid_out`.
pub fn bilinear_matrix(grid_in: (usize, usize), grid_out: (usize, usize)) -> Vec<f64> {
    let rows = bilinear_weights(grid_out.0, grid_in.0);
    let cols = bilinear_weights(grid_out.1, grid_in.1);
    let n_in = grid_in.0 * grid_in.1;
    let mut m = vec![0.0; grid_out.0 * grid_out.1 * n_in];
    for (oy, ry) in rows.iter().enumerate() {
        for (ox, rx) in cols.iter().enumerate() {
            let o = oy * grid_out.1 + ox;
            for &(iy, wy) in ry {
                for &(ix, wx) in rx {
                    m[o * n_in + iy * grid_in.1 + ix] += wy * wx;
                }
            }
        }
    }
    m
}

/// Bilinear resampling of each frame's feature map onto `grid`.
pub fn resample_to_grid(feat: &TokenFeatures, grid: (usize, usize)) -> Result<TokenFeatures> {
    if feat.grid == grid {
        return Ok(feat.clone());
    }
    let m = bilinear_matrix(feat.grid, grid);
    let m = Tensor::from_vec(m, (grid.0 * grid.1, feat.tokens()), feat.data.device())?
        .to_dtype(feat.data.dtype())?;
    let out = m.broadcast_matmul(&feat.data)?;
    TokenFeatures::new(out, grid, feat.source)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => x.gelu()?,
            Activation::Identity => x.clone(),
        })
    }
}

/// The trainable MLP `h_θ`: two hidden layers of the student's width.
#[derive(Debug, Clone)]
pub struct Adapter {
    layers: [Dense; 3],
    activation: Activation,
}

impl Adapter {
    pub fn new(vs: &mut VarStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            layers: [
                Dense::new(vs, &format!("{prefix}.fc1"), in_dim, out_dim)?,
                Dense::new(vs, &format!("{prefix}.fc2"), out_dim, out_dim)?,
                Dense::new(vs, &format!("{prefix}.fc3"), out_dim, out_dim)?,
            ],
            activation: Activation::Gelu,
        })
    }

    pub fn from_layers(layers: [Dense; 3], activation: Activation) -> Result<Self> {
        if layers[0].out_dim() != layers[1].in_dim() || layers[1].out_dim() != layers[2].in_dim() {
            return Err(invalid!("adapter layer widths do not chain"));
        }
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[2].out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.activation.apply(&self.layers[0].forward(x)?)?;
        let h = self.activation.apply(&self.layers[1].forward(&h)?)?;
        self.layers[2].forward(&h)
    }
}

/// `y = h_θ(f_ea)`. Teacher features are detached so gradients reach only the adapter.
pub fn adapt(adapter: &Adapter, f_ea: &TokenFeatures) -> Result<TokenFeatures> {
    if f_ea.dim() != adapter.in_dim() {
        return Err(invalid!(
            "teacher dim {} does not match adapter input {}",
            f_ea.dim(),
            adapter.in_dim()
        ));
    }
    let y = adapter.forward(&f_ea.data.detach())?;
    TokenFeatures::new(y, f_ea.grid, FeatureSource::TeacherAdapted)
}

/// Per-frame cosine similarity matrices `[F, N, N]`.
#[derive(Debug, Clone)]
pub struct RelationMatrix {
    data: Tensor,
}

impl RelationMatrix {
    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn tokens(&self) -> usize {
        self.data.dims()[1]
    }

    /// Host copy, indexed `[f][i][j]`.
    pub fn to_vec3(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        Ok(self.data.to_dtype(DType::F64)?.to_vec3::<f64>()?)
    }
}

/// `R(f)(i, j) = <x_fi, x_fj> / (‖x_fi‖ ‖x_fj‖)`.
pub fn relation_matrix(feat: &TokenFeatures) -> Result<RelationMatrix> {
    let norms = feat.data.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?; // [F, N, 1]
    let host = norms.to_dtype(DType::F64)?.squeeze(D::Minus1)?.to_vec2::<f64>()?;
    for (frame, row) in host.iter().enumerate() {
        if let Some(index) = row.iter().position(|&n| !(n >= MIN_TOKEN_NORM)) {
            return Err(Error::ZeroNormToken { frame, index });
        }
    }
    let unit = feat.data.broadcast_div(&norms)?;
    let r = unit.matmul(&unit.transpose(1, 2)?.contiguous()?)?;
    Ok(RelationMatrix { data: r })
}

/// Loss value plus the number of frames that contributed to it.
#[derive(Debug, Clone)]
pub struct OirdLoss {
    pub value: Tensor,
    pub active_frames: usize,
}

impl OirdLoss {
    /// True when no frame had both an object and a side-effect token.
    pub fn is_empty(&self) -> bool {
        self.active_frames == 0
    }
}

/// Mean over frames of the mean `|R̂(i,j) − R(i,j)|` over
/// `i ∈ M_obj^(f)`, `j ∈ M_se^(f)`. Frames where either set is empty are skipped;
/// with no active frame the loss is zero and [`OirdLoss::is_empty`] is set.
pub fn oird_loss(
    r_student: &RelationMatrix,
    r_teacher: &RelationMatrix,
    sets: &TokenIndexSets,
) -> Result<OirdLoss> {
    let (f, n, _) = r_student.data.dims3()?;
    if r_teacher.data.dims() != r_student.data.dims() {
        return Err(invalid!(
            "relation shapes differ: {:?} vs {:?}",
            r_student.data.dims(),
            r_teacher.data.dims()
        ));
    }
    if sets.frames() != f {
        return Err(invalid!("index sets cover {} frames, relations {f}", sets.frames()));
    }
    let device = r_student.data.device();
    let dtype = r_student.data.dtype();
    let mut total: Option<Tensor> = None;
    let mut active = 0usize;
    for frame in 0..f {
        let (obj, se) = (&sets.object[frame], &sets.side_effect[frame]);
        if obj.is_empty() || se.is_empty() {
            continue;
        }
        if obj.iter().chain(se).any(|&i| i >= n) {
            return Err(invalid!("token index out of range at frame {frame}"));
        }
        let rows = Tensor::from_vec(obj.iter().map(|&i| i as u32).collect::<Vec<_>>(), obj.len(), device)?;
        let cols = Tensor::from_vec(se.iter().map(|&i| i as u32).collect::<Vec<_>>(), se.len(), device)?;
        let pick = |r: &Tensor| -> Result<Tensor> {
            Ok(r.i(frame)?.index_select(&rows, 0)?.index_select(&cols, 1)?)
        };
        let term = (pick(&r_student.data)? - pick(&r_teacher.data)?)?
            .abs()?
            .mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
        active += 1;
    }
    let value = match total {
        Some(t) => (t / active as f64)?,
        None => Tensor::zeros((), dtype, device)?,
    };
    Ok(OirdLoss {
        value,
        active_frames: active,
    })
}

/// Precomputed teacher features for one clip: `<dir>/<clip_id>.safetensors` holding a
/// `features` tensor `[F, N, D]` and `grid_h` / `grid_w` metadata.
pub fn load_external_features(dir: impl AsRef<Path>, clip_id: &str) -> Result<TokenFeatures> {
    let path = dir.as_ref().join(format!("{clip_id}.safetensors"));
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| invalid!("{}: {e}", path.display()))?;
    let meta = meta.metadata().clone().unwrap_or_default();
    let dim = |key: &str| -> Result<usize> {
        meta.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| invalid!("{}: missing metadata {key}", path.display()))
    };
    let grid = (dim("grid_h")?, dim("grid_w")?);
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let data = tensors
        .get("features")
        .ok_or_else(|| invalid!("{}: no `features` tensor", path.display()))?
        .to_dtype(DType::F32)?;
    TokenFeatures::new(data.detach(), grid, FeatureSource::TeacherRaw)
}

pub fn save_external_features(
    dir: impl AsRef<Path>,
    clip_id: &str,
    feat: &TokenFeatures,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{clip_id}.safetensors"));
    let meta = std::collections::HashMap::from([
        ("grid_h".to_string(), feat.grid.0.to_string()),
        ("grid_w".to_string(), feat.grid.1.to_string()),
    ]);
    let data = feat.data.to_dtype(DType::F32)?.contiguous()?;
    safetensors::serialize_to_file([("features", &data)], Some(meta), &path)
        .map_err(|e| invalid!("{}: {e}", path.display()))
}
