//! Procedural paired clips: a single moving object over a static background,
//! with an optional shadow or reflection that the object induces outside its own
//! silhouette.

use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::video::{self, ClipManifest, ManifestEntry, MaskTensor, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Square,
    Disc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideEffect {
    Shadow,
    Reflection,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Gradient,
    Checker,
}

/// Linear motion of the object centre, in pixels: `centre(f) = start + f * velocity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub start: (f32, f32),
    pub velocity: (f32, f32),
}

impl Motion {
    pub fn centre(&self, f: usize) -> (f32, f32) {
        (
            self.start.0 + f as f32 * self.velocity.0,
            self.start.1 + f as f32 * self.velocity.1,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `(H, W)`
    pub resolution: (usize, usize),
    pub frames: usize,
    pub object_kind: ObjectKind,
    /// Half side length for squares, radius for discs.
    pub object_radius: f32,
    pub motion: Motion,
    pub side_effect: SideEffect,
    /// `(dy, dx)` displacement of the shadow relative to the object.
    pub shadow_offset: (i32, i32),
    /// Darkening factor for shadows, blend weight for reflections.
    pub shadow_opacity: f32,
    pub background: Background,
    /// Drives colours and checker phase.
    pub seed: u64,
}

/// Per-pixel geometry the renderer uses, exposed so callers can check masks against it.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub object: MaskTensor,
    /// Pixels altered by the side effect, excluding the object silhouette.
    pub effect: MaskTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPair {
    pub v_ori: VideoTensor,
    pub v_gt: VideoTensor,
    pub m_obj: MaskTensor,
}

struct Palette {
    object: [f32; 3],
    bg_a: [f32; 3],
    bg_b: [f32; 3],
    checker_cell: usize,
    checker_phase: (usize, usize),
}

impl Palette {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut colour = |lo: f32, hi: f32| -> [f32; 3] {
            [
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ]
        };
        let bg_a = colour(0.35, 0.95);
        let bg_b = colour(0.35, 0.95);
        // Objects are dark or saturated against bright backgrounds.
        let object = colour(0.0, 0.3);
        let checker_cell = rng.random_range(6..=12);
        let checker_phase = (rng.random_range(0..checker_cell), rng.random_range(0..checker_cell));
        Self {
            object,
            bg_a,
            bg_b,
            checker_cell,
            checker_phase,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if self.frames == 0 || h == 0 || w == 0 {
            return Err(invalid!("scene has an empty dimension"));
        }
        if !(self.object_radius > 0.0) {
            return Err(invalid!("object radius must be positive"));
        }
        if !(self.shadow_opacity > 0.0 && self.shadow_opacity <= 1.0) {
            return Err(invalid!(
                "shadow_opacity {} outside (0, 1]",
                self.shadow_opacity
            ));
        }
        let r = self.object_radius;
        // Linear motion: the extremes are reached at the first and last frame.
        for f in [0, self.frames - 1] {
            let (cy, cx) = self.motion.centre(f);
            if cy - r < 0.0 || cx - r < 0.0 || cy + r > h as f32 || cx + r > w as f32 {
                return Err(invalid!(
                    "object leaves the frame at frame {f} (centre {cy:.2},{cx:.2}, radius {r})"
                ));
            }
        }
        if self.side_effect == SideEffect::Shadow && self.shadow_offset == (0, 0) {
            return Err(invalid!("shadow offset must be non-zero"));
        }
        Ok(())
    }

    fn inside(&self, f: usize, y: f32, x: f32) -> bool {
        let (cy, cx) = self.motion.centre(f);
        let r = self.object_radius;
        match self.object_kind {
            ObjectKind::Square => (y - cy).abs() <= r && (x - cx).abs() <= r,
            ObjectKind::Disc => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }

    /// Silhouette test for pixel `(y, x)` using its centre.
    pub fn object_covers(&self, f: usize, y: usize, x: usize) -> bool {
        self.inside(f, y as f32 + 0.5, x as f32 + 0.5)
    }

    fn effect_covers(&self, f: usize, y: usize, x: usize) -> bool {
        let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
        match self.side_effect {
            SideEffect::None => false,
            SideEffect::Shadow => {
                let (dy, dx) = self.shadow_offset;
                self.inside(f, py - dy as f32, px - dx as f32)
            }
            SideEffect::Reflection => {
                let axis = self.motion.centre(f).0 + self.object_radius;
                py > axis && self.inside(f, 2.0 * axis - py, px)
            }
        }
    }

    fn background_at(&self, palette: &Palette, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = self.resolution;
        match self.background {
            Background::Flat => palette.bg_a[c],
            Background::Gradient => {
                let t = (x as f32 + y as f32) / ((w + h).max(2) - 2) as f32;
                palette.bg_a[c] * (1.0 - t) + palette.bg_b[c] * t
            }
            Background::Checker => {
                let cell = palette.checker_cell;
                let (py, px) = palette.checker_phase;
                if ((y + py) / cell + (x + px) / cell) % 2 == 0 {
                    palette.bg_a[c]
                } else {
                    palette.bg_b[c]
                }
            }
        }
    }

    pub fn geometry(&self) -> Result<SceneGeometry> {
        self.validate()?;
        let (h, w) = self.resolution;
        let object = MaskTensor::from_fn(self.frames, h, w, |f, y, x| self.object_covers(f, y, x));
        let effect = MaskTensor::from_fn(self.frames, h, w, |f, y, x| {
            !self.object_covers(f, y, x) && self.effect_covers(f, y, x)
        });
        Ok(SceneGeometry { object, effect })
    }
}

/// Renders `(V_ori, V_gt, M_obj)` for a scene. Deterministic in `spec`.
pub fn generate_pair(spec: &SceneSpec) -> Result<GeneratedPair> {
    let geometry = spec.geometry()?;
    let palette = Palette::from_seed(spec.seed);
    let (h, w) = spec.resolution;
    let f = spec.frames;
    let a = spec.shadow_opacity;

    let gt = Array4::from_shape_fn((3, f, h, w), |(c, _, y, x)| spec.background_at(&palette, c, y, x));
    let ori = Array4::from_shape_fn((3, f, h, w), |(c, t, y, x)| {
        let bg = gt[(c, t, y, x)];
        if geometry.object.get(t, y, x) {
            palette.object[c]
        } else if geometry.effect.get(t, y, x) {
            match spec.side_effect {
                SideEffect::Shadow => bg * (1.0 - a),
                SideEffect::Reflection => (1.0 - a) * bg + a * palette.object[c],
                SideEffect::None => bg,
            }
        } else {
            bg
        }
    });
    Ok(GeneratedPair {
        v_ori: VideoTensor::new(ori)?,
        v_gt: VideoTensor::new(gt)?,
        m_obj: geometry.object,
    })
}

/// Ranges from which [`sample_spec`] draws scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDistribution {
    pub frames: usize,
    pub resolution: (usize, usize),
    pub radius: (f32, f32),
    /// Relative weights of shadow / reflection / none.
    pub effect_weights: [f32; 3],
    pub opacity: (f32, f32),
    /// Per-axis shadow offset magnitude range, pixels.
    pub offset: (i32, i32),
    /// Largest per-frame displacement, pixels.
    pub max_speed: f32,
}

impl SpecDistribution {
    pub fn new(frames: usize, resolution: (usize, usize)) -> Self {
        let short = resolution.0.min(resolution.1) as f32;
        Self {
            frames,
            resolution,
            radius: ((short * 0.08).max(1.5), (short * 0.15).max(2.0)),
            effect_weights: [0.5, 0.3, 0.2],
            opacity: (0.4, 0.8),
            offset: (((short * 0.06) as i32).max(1), ((short * 0.12) as i32).max(2)),
            max_speed: (short * 0.03).max(0.25),
        }
    }

    /// Shadows only.
    pub fn shadows(frames: usize, resolution: (usize, usize)) -> Self {
        Self {
            effect_weights: [1.0, 0.0, 0.0],
            ..Self::new(frames, resolution)
        }
    }
}

/// Draws a valid scene from `dist`; every draw passes [`generate_pair`]'s validation.
pub fn sample_spec(dist: &SpecDistribution, rng: &mut impl Rng) -> Result<SceneSpec> {
    let (h, w) = dist.resolution;
    let r = rng.random_range(dist.radius.0..=dist.radius.1);
    let total: f32 = dist.effect_weights.iter().sum();
    if !(total > 0.0) {
        return Err(invalid!("effect weights must have a positive sum"));
    }
    let pick = rng.random_range(0.0..total);
    let side_effect = if pick < dist.effect_weights[0] {
        SideEffect::Shadow
    } else if pick < dist.effect_weights[0] + dist.effect_weights[1] {
        SideEffect::Reflection
    } else {
        SideEffect::None
    };
    let signed = |rng: &mut dyn RngCore| {
        let m = rng.random_range(dist.offset.0..=dist.offset.1);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    };
    let shadow_offset = match side_effect {
        SideEffect::Shadow => (signed(rng), signed(rng)),
        _ => (0, 0),
    };
    // Centre box that keeps object and its effect inside the frame.
    let (dy, dx) = (shadow_offset.0 as f32, shadow_offset.1 as f32);
    let mut y_lo = r + (-dy).max(0.0);
    let mut y_hi = h as f32 - r - dy.max(0.0);
    let x_lo = r + (-dx).max(0.0);
    let x_hi = w as f32 - r - dx.max(0.0);
    if side_effect == SideEffect::Reflection {
        y_hi = h as f32 - 3.0 * r;
        y_lo = y_lo.min(y_hi);
    }
    if y_lo > y_hi || x_lo > x_hi {
        return Err(invalid!("resolution {h}x{w} too small for radius {r}"));
    }
    let start = (rng.random_range(y_lo..=y_hi), rng.random_range(x_lo..=x_hi));
    let span = (dist.frames.max(2) - 1) as f32;
    let reach = dist.max_speed * span;
    let end = (
        rng.random_range((start.0 - reach).max(y_lo)..=(start.0 + reach).min(y_hi)),
        rng.random_range((start.1 - reach).max(x_lo)..=(start.1 + reach).min(x_hi)),
    );
    let velocity = if dist.frames > 1 {
        ((end.0 - start.0) / span, (end.1 - start.1) / span)
    } else {
        (0.0, 0.0)
    };
    let object_kind = if rng.random::<bool>() {
        ObjectKind::Square
    } else {
        ObjectKind::Disc
    };
    let background = match rng.random_range(0..3) {
        0 => Background::Flat,
        1 => Background::Gradient,
        _ => Background::Checker,
    };
    Ok(SceneSpec {
        resolution: dist.resolution,
        frames: dist.frames,
        object_kind,
        object_radius: r,
        motion: Motion { start, velocity },
        side_effect,
        shadow_offset,
        shadow_opacity: rng.random_range(dist.opacity.0..=dist.opacity.1),
        background,
        seed: rng.next_u64(),
    })
}

/// Per-clip seeds, derived in order from the master seed.
pub fn clip_seeds(n_clips: usize, master_seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..n_clips).map(|_| rng.next_u64()).collect()
}

pub fn clip_dir_name(i: usize) -> String {
    format!("clip_{i:05}")
}

/// Renders `n_clips` pairs in memory; clip `i` is identical to the one
/// [`make_dataset`] writes for the same seed.
pub fn generate_pairs(
    n_clips: usize,
    dist: &SpecDistribution,
    master_seed: u64,
) -> Result<Vec<GeneratedPair>> {
    clip_seeds(n_clips, master_seed)
        .par_iter()
        .map(|&seed| generate_pair(&sample_spec(dist, &mut ChaCha8Rng::seed_from_u64(seed))?))
        .collect()
}

/// Renders `n_clips` pairs under `out_dir` and writes `out_dir/manifest.json`.
pub fn make_dataset(
    n_clips: usize,
    dist: &SpecDistribution,
    master_seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<ClipManifest> {
    if n_clips == 0 {
        return Err(invalid!("n_clips must be at least 1"));
    }
    let out_dir = out_dir.as_ref();
    let seeds = clip_seeds(n_clips, master_seed);
    let entries = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| -> Result<ManifestEntry> {
            let spec = sample_spec(dist, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let pair = generate_pair(&spec)?;
            let name = clip_dir_name(i);
            let rel = PathBuf::from(&name);
            video::save_clip(&pair.v_ori, out_dir.join(&name).join("input"))?;
            video::save_clip(&pair.v_gt, out_dir.join(&name).join("gt"))?;
            video::save_mask(&pair.m_obj, out_dir.join(&name).join("mask"))?;
            Ok(ManifestEntry {
                id: Some(name),
                input: rel.join("input"),
                gt: Some(rel.join("gt")),
                mask: rel.join("mask"),
                frames: spec.frames,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = ClipManifest::new(entries);
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
