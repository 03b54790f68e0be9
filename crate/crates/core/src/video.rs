//! Clip data model and frame-directory I/O.
//!
//! A clip is stored on disk as a directory of zero-padded, 1-based PNG frames
//! (`frame_00001.png`, ...) and, optionally, binary masks (`mask_00001.png`, ...).
//! Pixel values live in `[0, 1]` in memory and are quantized to 8 bits on disk.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const CHANNELS: usize = 3;
pub const DEFAULT_FRAME_RATE: f32 = 16.0;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

const FRAME_PREFIX: &str = "frame_";
const MASK_PREFIX: &str = "mask_";

/// An RGB clip laid out as `[C, F, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Array4<f32>,
    frame_rate: f32,
}

impl VideoTensor {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        Self::with_frame_rate(data, DEFAULT_FRAME_RATE)
    }

    pub fn with_frame_rate(data: Array4<f32>, frame_rate: f32) -> Result<Self> {
        let (c, f, h, w) = data.dim();
        if c != CHANNELS {
            return Err(invalid!("video must have {CHANNELS} channels, got {c}"));
        }
        if f == 0 || h == 0 || w == 0 {
            return Err(invalid!("video has an empty dimension: F={f} H={h} W={w}"));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(invalid!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self { data, frame_rate })
    }

    /// Builds a clip from raw values, clamping into `[0, 1]`. Non-finite values are rejected.
    pub fn from_clamped(mut data: Array4<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("non-finite pixel value"));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data)
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array4::zeros((CHANNELS, frames, height, width)),
            frame_rate: DEFAULT_FRAME_RATE,
        }
    }

    pub fn from_fn<F>(frames: usize, height: usize, width: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize, usize) -> f32,
    {
        let data = Array4::from_shape_fn((CHANNELS, frames, height, width), |(c, t, y, x)| {
            f(c, t, y, x)
        });
        Self::new(data)
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn frame_rate(&self) -> f32 {
        self.frame_rate
    }

    pub fn frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// `(F, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let (_, f, h, w) = self.data.dim();
        (f, h, w)
    }

    /// View of one frame as `[C, H, W]`.
    pub fn frame(&self, f: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(1), f)
    }

    /// Copies frame `src_frame` of `src` into frame `dst_frame` of `self`.
    pub fn set_frame_from(&mut self, dst_frame: usize, src: &VideoTensor, src_frame: usize) {
        let src_view = src.data.slice(s![.., src_frame, .., ..]);
        self.data
            .slice_mut(s![.., dst_frame, .., ..])
            .assign(&src_view);
    }

    /// Sub-clip made of the listed frames, in order.
    pub fn select_frames(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(1), indices),
            frame_rate: self.frame_rate,
        }
    }

    /// Frames `[start, end)`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data.slice(s![.., start..end, .., ..]).to_owned(),
            frame_rate: self.frame_rate,
        }
    }

    /// `self ⊙ (1 − mask)`: zeroes every masked pixel in all channels.
    pub fn masked_out(&self, mask: &MaskTensor) -> Result<Self> {
        mask.check_matches(self)?;
        let mut data = self.data.clone();
        for ((_, f, y, x), v) in data.indexed_iter_mut() {
            if mask.data[(f, y, x)] {
                *v = 0.0;
            }
        }
        Ok(Self {
            data,
            frame_rate: self.frame_rate,
        })
    }

    /// Dense tensor `[C, F, H, W]`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (c, f, h, w) = self.data.dim();
        let flat: Vec<f32> = self.data.iter().copied().collect();
        Ok(Tensor::from_vec(flat, (c, f, h, w), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`VideoTensor::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, f, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let data = Array4::from_shape_vec((c, f, h, w), flat)
            .map_err(|e| invalid!("tensor shape: {e}"))?;
        Self::from_clamped(data)
    }
}

/// A binary per-pixel, per-frame mask `[F, H, W]` (the channel axis of size 1 is implicit).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    data: Array3<bool>,
}

impl MaskTensor {
    pub fn new(data: Array3<bool>) -> Result<Self> {
        let (f, h, w) = data.dim();
        if f == 0 || h == 0 || w == 0 {
            return Err(invalid!("mask has an empty dimension: F={f} H={h} W={w}"));
        }
        Ok(Self { data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::from_elem((frames, height, width), false),
        }
    }

    pub fn ones(frames: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::from_elem((frames, height, width), true),
        }
    }

    pub fn from_fn<F>(frames: usize, height: usize, width: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize, usize) -> bool,
    {
        Self {
            data: Array3::from_shape_fn((frames, height, width), |(t, y, x)| f(t, y, x)),
        }
    }

    pub fn data(&self) -> &Array3<bool> {
        &self.data
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.data[(f, y, x)]
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    /// `(F, H, W)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &MaskTensor) -> Result<Self> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &MaskTensor) -> Result<Self> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn not(&self) -> Self {
        Self {
            data: self.data.mapv(|b| !b),
        }
    }

    fn zip_with(&self, other: &MaskTensor, op: impl Fn(bool, bool) -> bool) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(invalid!(
                "mask shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            ));
        }
        let mut data = self.data.clone();
        data.zip_mut_with(&other.data, |a, &b| *a = op(*a, b));
        Ok(Self { data })
    }

    pub fn clear_frame(&mut self, f: usize) {
        self.data.index_axis_mut(Axis(0), f).fill(false);
    }

    pub fn select_frames(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
        }
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data.slice(s![start..end, .., ..]).to_owned(),
        }
    }

    pub fn check_matches(&self, video: &VideoTensor) -> Result<()> {
        if self.dims() != video.dims() {
            return Err(invalid!(
                "mask shape {:?} does not match video shape {:?}",
                self.dims(),
                video.dims()
            ));
        }
        Ok(())
    }

    /// Dense `{0, 1}` tensor `[1, F, H, W]`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (f, h, w) = self.data.dim();
        let flat: Vec<f32> = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(flat, (1, f, h, w), device)?.to_dtype(dtype)?)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dequantize(v: u8) -> f32 {
    f32::from(v) / 255.0
}

fn numbered_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(stem) = name
            .strip_prefix(prefix)
            .and_then(|rest| rest.strip_suffix(".png"))
        else {
            continue;
        };
        if let Ok(idx) = stem.parse::<u64>() {
            found.push((idx, entry.path()));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn frame_name(prefix: &str, f: usize) -> String {
    format!("{prefix}{:05}.png", f + 1)
}

/// Loads `frame_*.png` (and `mask_*.png` when present) from `dir`.
pub fn load_clip(dir: impl AsRef<Path>) -> Result<(VideoTensor, Option<MaskTensor>)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "clip directory not found"),
        ));
    }
    let frames = numbered_files(dir, FRAME_PREFIX)?;
    if frames.is_empty() {
        return Err(invalid!("no frames found in {}", dir.display()));
    }
    let masks = numbered_files(dir, MASK_PREFIX)?;
    if !masks.is_empty() && masks.len() != frames.len() {
        return Err(invalid!(
            "{} frames but {} masks in {}",
            frames.len(),
            masks.len(),
            dir.display()
        ));
    }
    let video = read_frames(&frames)?;
    let mask = if masks.is_empty() {
        None
    } else {
        let mask = read_masks(&masks)?;
        mask.check_matches(&video)?;
        Some(mask)
    };
    Ok((video, mask))
}

/// Loads only the `mask_*.png` files of `dir`.
pub fn load_mask(dir: impl AsRef<Path>) -> Result<MaskTensor> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "mask directory not found"),
        ));
    }
    let masks = numbered_files(dir, MASK_PREFIX)?;
    if masks.is_empty() {
        return Err(invalid!("no masks found in {}", dir.display()));
    }
    read_masks(&masks)
}

fn read_frames(paths: &[PathBuf]) -> Result<VideoTensor> {
    let mut decoded = Vec::with_capacity(paths.len());
    for p in paths {
        let img = image::open(p)
            .map_err(|source| Error::Image {
                path: p.clone(),
                source,
            })?
            .to_rgb8();
        decoded.push(img);
    }
    let (w, h) = decoded[0].dimensions();
    if let Some((i, _)) = decoded
        .iter()
        .enumerate()
        .find(|(_, img)| img.dimensions() != (w, h))
    {
        return Err(invalid!("frame {} has a different size", paths[i].display()));
    }
    let (h, w) = (h as usize, w as usize);
    let data = Array4::from_shape_fn((CHANNELS, decoded.len(), h, w), |(c, f, y, x)| {
        dequantize(decoded[f].get_pixel(x as u32, y as u32)[c])
    });
    VideoTensor::new(data)
}

fn read_masks(paths: &[PathBuf]) -> Result<MaskTensor> {
    let mut decoded = Vec::with_capacity(paths.len());
    for p in paths {
        let img = image::open(p)
            .map_err(|source| Error::Image {
                path: p.clone(),
                source,
            })?
            .to_luma8();
        decoded.push(img);
    }
    let (w, h) = decoded[0].dimensions();
    if decoded.iter().any(|img| img.dimensions() != (w, h)) {
        return Err(invalid!("mask frames have inconsistent sizes"));
    }
    let (h, w) = (h as usize, w as usize);
    let data = Array3::from_shape_fn((decoded.len(), h, w), |(f, y, x)| {
        dequantize(decoded[f].get_pixel(x as u32, y as u32)[0]) >= 0.5
    });
    MaskTensor::new(data)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `frame_00001.png`, ... into `dir` (created if missing).
pub fn save_clip(video: &VideoTensor, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    let (f, h, w) = video.dims();
    for t in 0..f {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                quantize(video.data[(0, t, y, x)]),
                quantize(video.data[(1, t, y, x)]),
                quantize(video.data[(2, t, y, x)]),
            ])
        });
        let path = dir.join(frame_name(FRAME_PREFIX, t));
        img.save(&path)
            .map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

/// Writes `mask_00001.png`, ... (0 or 255) into `dir`.
pub fn save_mask(mask: &MaskTensor, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    let (f, h, w) = mask.dims();
    for t in 0..f {
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([if mask.data[(t, y as usize, x as usize)] { 255 } else { 0 }])
        });
        let path = dir.join(frame_name(MASK_PREFIX, t));
        img.save(&path)
            .map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

/// Number of `frame_*.png` files in a directory (`mask_*.png` when `masks` is set).
pub fn count_frames(dir: impl AsRef<Path>, masks: bool) -> Result<usize> {
    let prefix = if masks { MASK_PREFIX } else { FRAME_PREFIX };
    Ok(numbered_files(dir.as_ref(), prefix)?.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub input: PathBuf,
    #[serde(default)]
    pub gt: Option<PathBuf>,
    pub mask: PathBuf,
    pub frames: usize,
}

impl ManifestEntry {
    /// Explicit id, or the name of the directory holding the input frames' parent.
    pub fn clip_id(&self) -> String {
        if let Some(id) = &self.id {
            return id.clone();
        }
        let parent = self.input.parent().and_then(|p| p.file_name());
        let own = self.input.file_name();
        parent
            .or(own)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.input.display().to_string())
    }
}

/// JSON index of paired clips. Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl ClipManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            entries,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: ClipManifest = serde_json::from_str(&text)?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(invalid!(
                "unsupported manifest format_version {}",
                manifest.format_version
            ));
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for e in &mut manifest.entries {
            e.input = resolve(base, &e.input);
            e.mask = resolve(base, &e.mask);
            e.gt = e.gt.as_ref().map(|g| resolve(base, g));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks that every path exists and each triple agrees on its frame count.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            let mut counts = vec![
                ("input", count_frames_checked(&e.input, false)?),
                ("mask", count_frames_checked(&e.mask, true)?),
            ];
            if let Some(gt) = &e.gt {
                counts.push(("gt", count_frames_checked(gt, false)?));
            }
            for (what, n) in counts {
                if n != e.frames {
                    return Err(invalid!(
                        "clip {}: {what} has {n} frames, manifest says {}",
                        e.clip_id(),
                        e.frames
                    ));
                }
            }
        }
        Ok(())
    }
}

fn count_frames_checked(dir: &Path, masks: bool) -> Result<usize> {
    if !dir.is_dir() {
        return Err(invalid!("manifest path {} does not exist", dir.display()));
    }
    count_frames(dir, masks)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
