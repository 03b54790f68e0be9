//! Small neural-network building blocks on top of candle.
//!
//! Parameters live in a [`VarStore`], an ordered name → `Var` map initialized from a
//! seeded generator so that model construction is reproducible.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`
    Uniform(f64),
    /// `N(0, std²)`
    Normal(f64),
}

/// Trainable parameters keyed by dotted name.
#[derive(Debug)]
pub struct VarStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl VarStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the existing parameter `name`, or creates it with `init`.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(invalid!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    v.dims()
                ));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| invalid!("bad init bound: {e}"))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| invalid!("bad init std: {e}"))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Inserts (or replaces) a parameter with a given value.
    pub fn insert(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }
}

/// Affine map `x W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Dense {
    /// PyTorch-style uniform init, `±1/sqrt(in)`.
    pub fn new(vs: &mut VarStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(vs, name, in_dim, out_dim, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn zeros(vs: &mut VarStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(vs, name, in_dim, out_dim, Init::Zeros, Init::Zeros)
    }

    pub fn with_init(
        vs: &mut VarStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        let weight = vs.get(&format!("{name}.weight"), &[in_dim, out_dim], weight)?;
        let bias = vs.get(&format!("{name}.bias"), &[out_dim], bias)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(vs: &mut VarStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = vs.get(&format!("{name}.weight"), &[in_dim, out_dim], Init::Uniform(bound))?;
        Ok(Self { weight, bias: None })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| invalid!("dense input is a scalar"))?;
        if last != self.in_dim() {
            return Err(invalid!(
                "dense layer expects last dim {}, got {last}",
                self.in_dim()
            ));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis, without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centred.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// `[B, C, F, H, W]` → `[B, F, N, C·p·p]` with tokens in row-major grid order and
/// features ordered `(c, dy, dx)`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, f, h, w) = x.dims5()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(invalid!("{h}x{w} frames are not divisible by patch size {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    let t = x
        .reshape(vec![b, c, f, gh, p, gw, p])?
        .permute(vec![0, 2, 3, 5, 1, 4, 6])?
        .contiguous()?;
    Ok(t.reshape((b, f, gh * gw, c * p * p))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, c: usize, grid: (usize, usize), p: usize) -> Result<Tensor> {
    let (b, f, n, d) = tokens.dims4()?;
    let (gh, gw) = grid;
    if n != gh * gw || d != c * p * p {
        return Err(invalid!(
            "cannot unpatchify [{b},{f},{n},{d}] to {c} channels, grid {grid:?}, patch {p}"
        ));
    }
    let t = tokens
        .reshape(vec![b, f, gh, gw, c, p, p])?
        .permute(vec![0, 4, 1, 2, 5, 3, 6])?
        .contiguous()?;
    Ok(t.reshape((b, c, f, gh * p, gw * p))?)
}

/// Standard normal samples drawn from `rng`, so that noise is reproducible.
pub fn randn<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Fixed sinusoidal embedding of scalar positions, `[len, dim]`.
pub fn sinusoidal(positions: &[f64], dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; positions.len() * dim];
    for (i, &pos) in positions.iter().enumerate() {
        for k in 0..half {
            let freq = (-(max_period.ln()) * k as f64 / half.max(1) as f64).exp();
            out[i * dim + k] = (pos * freq).sin();
            out[i * dim + half + k] = (pos * freq).cos();
        }
    }
    out
}
