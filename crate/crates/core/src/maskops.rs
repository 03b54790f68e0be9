//! Difference and side-effect masks, and their projection onto the token grid.

use ndarray::Array2;

use crate::error::{invalid, Result};
use crate::video::{MaskTensor, VideoTensor};

pub const DEFAULT_DELTA: f32 = 0.1;

/// Binary per-frame token mask `[F, N]` over an `h_tok x w_tok` grid (row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    data: Array2<bool>,
    grid: (usize, usize),
}

impl TokenMask {
    pub fn new(data: Array2<bool>, grid: (usize, usize)) -> Result<Self> {
        if data.dim().1 != grid.0 * grid.1 {
            return Err(invalid!(
                "token mask has {} tokens per frame, grid {:?} needs {}",
                data.dim().1,
                grid,
                grid.0 * grid.1
            ));
        }
        Ok(Self { data, grid })
    }

    pub fn zeros(frames: usize, grid: (usize, usize)) -> Self {
        Self {
            data: Array2::from_elem((frames, grid.0 * grid.1), false),
            grid,
        }
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.data.dim().1
    }

    pub fn get(&self, f: usize, n: usize) -> bool {
        self.data[(f, n)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn or(&self, other: &TokenMask) -> Result<Self> {
        if self.grid != other.grid || self.data.dim() != other.data.dim() {
            return Err(invalid!("token masks disagree in shape"));
        }
        let mut data = self.data.clone();
        data.zip_mut_with(&other.data, |a, &b| *a |= b);
        Ok(Self {
            data,
            grid: self.grid,
        })
    }
}

/// `M_diff(f,i,j) = ‖V_ori(:,f,i,j) − V_gt(:,f,i,j)‖₂ > delta`.
pub fn diff_mask(v_ori: &VideoTensor, v_gt: &VideoTensor, delta: f32) -> Result<MaskTensor> {
    if v_ori.dims() != v_gt.dims() {
        return Err(invalid!(
            "video shapes differ: {:?} vs {:?}",
            v_ori.dims(),
            v_gt.dims()
        ));
    }
    if !(delta > 0.0) {
        return Err(invalid!("delta must be positive, got {delta}"));
    }
    let (f, h, w) = v_ori.dims();
    let (a, b) = (v_ori.data(), v_gt.data());
    // Compare squared distances in f64 so the threshold is applied without rounding drift.
    let delta_sq = f64::from(delta) * f64::from(delta);
    Ok(MaskTensor::from_fn(f, h, w, |t, y, x| {
        let dist_sq: f64 = (0..3)
            .map(|c| {
                let d = f64::from(a[(c, t, y, x)]) - f64::from(b[(c, t, y, x)]);
                d * d
            })
            .sum();
        dist_sq > delta_sq
    }))
}

/// `M_se = M_diff ∧ ¬M_obj`.
pub fn side_effect_mask(m_diff: &MaskTensor, m_obj: &MaskTensor) -> Result<MaskTensor> {
    m_diff.and(&m_obj.not())
}

/// Pixel rows (or columns) covered by token `i` of `n` along an axis of `len` pixels.
/// Ranges tile the axis; when `len` is not a multiple of `n` neighbouring ranges may share a pixel.
pub fn token_span(i: usize, n: usize, len: usize) -> std::ops::Range<usize> {
    let start = i * len / n;
    let end = ((i + 1) * len).div_ceil(n);
    start..end
}

/// Max-pool projection: a token is set iff any pixel it covers is set.
pub fn to_token_mask(m: &MaskTensor, grid: (usize, usize)) -> Result<TokenMask> {
    let (f, h, w) = m.dims();
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(invalid!("token grid {grid:?} incompatible with {h}x{w} pixels"));
    }
    let data = Array2::from_shape_fn((f, gh * gw), |(t, n)| {
        let (ty, tx) = (n / gw, n % gw);
        let rows = token_span(ty, gh, h);
        let cols = token_span(tx, gw, w);
        rows.into_iter()
            .any(|y| cols.clone().any(|x| m.get(t, y, x)))
    });
    TokenMask::new(data, grid)
}

/// Per-frame index sets `(M_obj^(f), M_se^(f))` for the distillation loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIndexSets {
    pub object: Vec<Vec<usize>>,
    pub side_effect: Vec<Vec<usize>>,
}

impl TokenIndexSets {
    pub fn frames(&self) -> usize {
        self.object.len()
    }

    /// Frames where both sets are non-empty.
    pub fn active_frames(&self) -> usize {
        self.object
            .iter()
            .zip(&self.side_effect)
            .filter(|(o, s)| !o.is_empty() && !s.is_empty())
            .count()
    }
}

/// Sorted token indices per frame. Tokens present in both masks are dropped from the
/// side-effect set, since coarse tokens can straddle object and shadow.
pub fn token_index_sets(tm_obj: &TokenMask, tm_se: &TokenMask) -> Result<TokenIndexSets> {
    if tm_obj.grid() != tm_se.grid() || tm_obj.frames() != tm_se.frames() {
        return Err(invalid!(
            "token masks disagree: grid {:?}/{:?}, frames {}/{}",
            tm_obj.grid(),
            tm_se.grid(),
            tm_obj.frames(),
            tm_se.frames()
        ));
    }
    let mut object = Vec::with_capacity(tm_obj.frames());
    let mut side_effect = Vec::with_capacity(tm_obj.frames());
    for f in 0..tm_obj.frames() {
        object.push((0..tm_obj.tokens()).filter(|&n| tm_obj.get(f, n)).collect());
        side_effect.push(
            (0..tm_se.tokens())
                .filter(|&n| tm_se.get(f, n) && !tm_obj.get(f, n))
                .collect(),
        );
    }
    Ok(TokenIndexSets {
        object,
        side_effect,
    })
}
