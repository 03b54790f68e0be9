//! Paired video metrics (PSNR, SSIM) and benchmark reports over clip manifests.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::maskops::{diff_mask, DEFAULT_DELTA};
use crate::video::{load_clip, ClipManifest, ManifestEntry, MaskTensor, VideoTensor};

/// Reported instead of +∞ when two clips are identical.
pub const PSNR_CAP: f64 = 99.0;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        return Err(invalid!(
            "shape mismatch: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        ));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10 log10(1 / MSE)` over every channel, frame and pixel; `MAX = 1`.
pub fn psnr(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    check_shapes(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(psnr_from_mse(sse / a.data().len() as f64))
}

/// PSNR restricted to pixels inside `region` (all channels). `None` for an empty region.
pub fn psnr_region(a: &VideoTensor, b: &VideoTensor, region: &MaskTensor) -> Result<Option<f64>> {
    check_shapes(a, b)?;
    region.check_matches(a)?;
    let (f, h, w) = a.dims();
    let (da, db) = (a.data(), b.data());
    let mut sse = 0.0;
    let mut n = 0usize;
    for t in 0..f {
        for y in 0..h {
            for x in 0..w {
                if !region.get(t, y, x) {
                    continue;
                }
                for c in 0..3 {
                    sse += (f64::from(da[(c, t, y, x)]) - f64::from(db[(c, t, y, x)])).powi(2);
                }
                n += 3;
            }
        }
    }
    Ok((n > 0).then(|| psnr_from_mse(sse / n as f64)))
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn grayscale(frame: ArrayView3<'_, f32>) -> Array2<f64> {
    let (_, h, w) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * f64::from(frame[(0, y, x)])
            + 0.587 * f64::from(frame[(1, y, x)])
            + 0.114 * f64::from(frame[(2, y, x)])
    })
}

/// Separable "valid" filtering with `g` along both axes.
fn filter_valid(img: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = g.len();
    let horiz = Array2::from_shape_fn((h, w + 1 - k), |(y, x)| {
        g.iter().enumerate().map(|(i, gi)| gi * img[(y, x + i)]).sum::<f64>()
    });
    Array2::from_shape_fn((h + 1 - k, w + 1 - k), |(y, x)| {
        g.iter().enumerate().map(|(i, gi)| gi * horiz[(y + i, x)]).sum::<f64>()
    })
}

fn ssim_frame(a: &Array2<f64>, b: &Array2<f64>, g: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mu_a = filter_valid(a, g);
    let mu_b = filter_valid(b, g);
    let aa = filter_valid(&(a * a), g);
    let bb = filter_valid(&(b * b), g);
    let ab = filter_valid(&(a * b), g);
    let mut sum = 0.0;
    for (idx, &ma) in mu_a.indexed_iter() {
        let mb = mu_b[idx];
        let var_a = aa[idx] - ma * ma;
        let var_b = bb[idx] - mb * mb;
        let cov = ab[idx] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        sum += num / den;
    }
    sum / mu_a.len() as f64
}

/// Mean SSIM of the luma channel, averaged over frames.
pub fn ssim(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    check_shapes(a, b)?;
    let (f, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!(
            "{h}x{w} frames are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        ));
    }
    let g = gaussian_kernel();
    let total: f64 = (0..f)
        .map(|t| ssim_frame(&grayscale(a.frame(t)), &grayscale(b.frame(t)), &g))
        .sum();
    Ok(total / f as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Threshold for the difference mask used by region-restricted PSNR.
    pub delta: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR over pixels where input and ground truth differ; absent when the ground
    /// truth manifest has no input/target pair or the region is empty.
    pub psnr_diff_region: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_diff_region: Option<f64>,
    /// Reserved; perceptual metrics are not computed.
    pub lpips: Option<f64>,
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub per_clip: Vec<ClipScore>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn from_scores(config: EvalConfig, mut per_clip: Vec<ClipScore>) -> Result<Self> {
        if per_clip.is_empty() {
            return Err(invalid!("no clips to report"));
        }
        per_clip.sort_by(|a, b| a.id.cmp(&b.id));
        let n = per_clip.len() as f64;
        let regions: Vec<f64> = per_clip.iter().filter_map(|c| c.psnr_diff_region).collect();
        let aggregate = Aggregate {
            psnr: per_clip.iter().map(|c| c.psnr).sum::<f64>() / n,
            ssim: per_clip.iter().map(|c| c.ssim).sum::<f64>() / n,
            psnr_diff_region: (!regions.is_empty())
                .then(|| regions.iter().sum::<f64>() / regions.len() as f64),
            lpips: None,
            clips: per_clip.len(),
        };
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config,
            per_clip,
            aggregate,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn index_by_id(m: &ClipManifest) -> Result<BTreeMap<String, &ManifestEntry>> {
    let mut out = BTreeMap::new();
    for e in &m.entries {
        if out.insert(e.clip_id(), e).is_some() {
            return Err(invalid!("duplicate clip id {}", e.clip_id()));
        }
    }
    Ok(out)
}

fn score_clip(id: &str, pred: &ManifestEntry, gt: &ManifestEntry, cfg: &EvalConfig) -> Result<ClipScore> {
    let (v_pred, _) = load_clip(&pred.input)?;
    let (v_gt, v_ori) = match &gt.gt {
        Some(dir) => (load_clip(dir)?.0, Some(load_clip(&gt.input)?.0)),
        None => (load_clip(&gt.input)?.0, None),
    };
    check_shapes(&v_pred, &v_gt).map_err(|e| invalid!("clip {id}: {e}"))?;
    let psnr_diff_region = match v_ori {
        Some(v_ori) => psnr_region(&v_pred, &v_gt, &diff_mask(&v_ori, &v_gt, cfg.delta)?)?,
        None => None,
    };
    Ok(ClipScore {
        id: id.to_string(),
        psnr: psnr(&v_pred, &v_gt)?,
        ssim: ssim(&v_pred, &v_gt)?,
        psnr_diff_region,
    })
}

/// Scores predictions (each entry's `input` frames) against ground truth (each entry's
/// `gt` frames, or `input` when `gt` is absent). Clips are matched by id.
pub fn run_benchmark(
    pred: &ClipManifest,
    gt: &ClipManifest,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let p = index_by_id(pred)?;
    let g = index_by_id(gt)?;
    let pk: BTreeSet<_> = p.keys().collect();
    let gk: BTreeSet<_> = g.keys().collect();
    if pk != gk {
        let only_pred: Vec<_> = pk.difference(&gk).collect();
        let only_gt: Vec<_> = gk.difference(&pk).collect();
        return Err(invalid!(
            "manifests do not align; only in predictions: {only_pred:?}; only in ground truth: {only_gt:?}"
        ));
    }
    let scores = p
        .par_iter()
        .map(|(id, pe)| score_clip(id, pe, g[id], config))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(config.clone(), scores)
}
