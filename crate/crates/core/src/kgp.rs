//! Keyframe-guided propagation: removal on clips longer than the model's window.
//!
//! Every `k`-th frame (`k = ceil(F / W)`) is first processed as one sub-sampled clip.
//! Those outputs are injected back into the video with their masks cleared, and the
//! video is then processed in windows of at most `W` frames whose boundaries sit on
//! shared keyframes. Overlapping frames are kept from the earlier window.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Remover;
use crate::error::{invalid, Result};
use crate::video::{MaskTensor, VideoTensor};

/// Default window: the clip length the model was trained on.
pub const DEFAULT_WINDOW: usize = 81;

/// `k = ceil(F / W)`.
pub fn keyframe_stride(frames: usize, window: usize) -> usize {
    frames.div_ceil(window.max(1)).max(1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframeSchedule {
    pub frames: usize,
    pub window: usize,
    pub stride: usize,
    pub keyframes: Vec<usize>,
}

impl KeyframeSchedule {
    pub fn new(frames: usize, window: usize) -> Self {
        let stride = keyframe_stride(frames, window);
        Self {
            frames,
            window,
            stride,
            keyframes: (0..frames).step_by(stride).collect(),
        }
    }

    pub fn is_keyframe(&self, f: usize) -> bool {
        f < self.frames && f % self.stride == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropRule {
    /// Frames in the overlap come from the earlier window.
    KeepFormer,
}

/// Merge instruction for windows `i` and `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapDirective {
    /// Keyframe on which window `i + 1` starts, if the windows overlap.
    pub shared_keyframe: Option<usize>,
    /// Frames present in both windows, `[start, end)`.
    pub overlap: Window,
    pub rule: DropRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub windows: Vec<Window>,
    pub overlaps: Vec<OverlapDirective>,
}

impl WindowPlan {
    /// Frames each window contributes to the merged output.
    pub fn kept_segments(&self) -> Vec<Window> {
        let mut prev_end = 0;
        self.windows
            .iter()
            .map(|w| {
                let seg = Window {
                    start: w.start.max(prev_end),
                    end: w.end,
                };
                prev_end = w.end;
                seg
            })
            .collect()
    }
}

/// Keyframe schedule and window plan for `frames` frames and window length `window`.
pub fn plan(frames: usize, window: usize) -> Result<(KeyframeSchedule, WindowPlan)> {
    if frames == 0 || window == 0 {
        return Err(invalid!("frames and window must be positive"));
    }
    let schedule = KeyframeSchedule::new(frames, window);
    let k = schedule.stride;
    let mut windows = Vec::new();
    let mut overlaps = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(frames);
        windows.push(Window { start, end });
        if end == frames {
            break;
        }
        // Last keyframe inside the current window; starts are keyframes, so this is a
        // multiple of k. Without progress (k >= W) the next window simply abuts.
        let last_key = (start + window - 1) / k * k;
        let next = if k > 1 && last_key > start { last_key } else { end };
        overlaps.push(OverlapDirective {
            shared_keyframe: (next < end).then_some(next),
            overlap: Window { start: next, end },
            rule: DropRule::KeepFormer,
        });
        start = next;
    }
    Ok((schedule, WindowPlan { windows, overlaps }))
}

/// Results of the keyframe pass, one output frame per keyframe index.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeOutputs {
    pub indices: Vec<usize>,
    pub frames: VideoTensor,
}

/// Runs the remover once on the sub-sampled keyframe clip. Returns `None` when the
/// stride is 1, since the single window then covers every frame.
pub fn run_keyframe_pass(
    remover: &dyn Remover,
    v_ori: &VideoTensor,
    m_obj: &MaskTensor,
    schedule: &KeyframeSchedule,
    seed: u64,
) -> Result<Option<KeyframeOutputs>> {
    m_obj.check_matches(v_ori)?;
    if v_ori.frames() != schedule.frames {
        return Err(invalid!(
            "schedule is for {} frames, video has {}",
            schedule.frames,
            v_ori.frames()
        ));
    }
    if schedule.keyframes.len() > schedule.window {
        return Err(invalid!(
            "{} keyframes exceed window {}; videos longer than W² frames are not supported",
            schedule.keyframes.len(),
            schedule.window
        ));
    }
    if schedule.stride == 1 {
        return Ok(None);
    }
    let clip = v_ori.select_frames(&schedule.keyframes);
    let mask = m_obj.select_frames(&schedule.keyframes);
    let frames = remover.remove(&clip, &mask, seed)?;
    if frames.dims() != clip.dims() {
        return Err(invalid!("remover changed keyframe clip shape"));
    }
    Ok(Some(KeyframeOutputs {
        indices: schedule.keyframes.clone(),
        frames,
    }))
}

fn window_seed(seed: u64, index: usize) -> u64 {
    // SplitMix64 finalizer so neighbouring windows get unrelated noise.
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Object removal on a clip of any length up to `W²` frames. Longer clips are rejected:
/// their stride would exceed the window and windows could no longer share keyframes.
pub fn remove_long(
    remover: &dyn Remover,
    v_ori: &VideoTensor,
    m_obj: &MaskTensor,
    window: usize,
    seed: u64,
) -> Result<VideoTensor> {
    m_obj.check_matches(v_ori)?;
    if v_ori.frames() > window.saturating_mul(window) {
        return Err(invalid!(
            "{} frames exceed W² = {} for window {window}",
            v_ori.frames(),
            window.saturating_mul(window)
        ));
    }
    let (schedule, plan) = plan(v_ori.frames(), window)?;
    let Some(keys) = run_keyframe_pass(remover, v_ori, m_obj, &schedule, seed)? else {
        return remover.remove(v_ori, m_obj, seed);
    };

    let mut video = v_ori.clone();
    let mut mask = m_obj.clone();
    for (i, &f) in keys.indices.iter().enumerate() {
        video.set_frame_from(f, &keys.frames, i);
        mask.clear_frame(f);
    }

    let outputs = plan
        .windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let out = remover.remove(
                &video.slice_frames(w.start, w.end),
                &mask.slice_frames(w.start, w.end),
                window_seed(seed, i),
            )?;
            if out.frames() != w.len() {
                return Err(invalid!("remover changed window length"));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let (f, h, w) = v_ori.dims();
    let mut merged = VideoTensor::zeros(f, h, w);
    for ((win, seg), out) in plan.windows.iter().zip(plan.kept_segments()).zip(&outputs) {
        for frame in seg.start..seg.end {
            merged.set_frame_from(frame, out, frame - win.start);
        }
    }
    for (i, &frame) in keys.indices.iter().enumerate() {
        merged.set_frame_from(frame, &keys.frames, i);
    }
    VideoTensor::with_frame_rate(merged.into_data(), v_ori.frame_rate())
}
