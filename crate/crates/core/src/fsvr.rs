//! Frame sequence for video representation: adaptive scene-cut detection,
//! middle-frame keyframes and the fixed 8-frame selection.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::SceneWindow;

#[derive(Debug, Error)]
pub enum FsvrError {
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("frame {index} is {got_h}x{got_w}, expected {h}x{w}")]
    MismatchedDimensions { index: usize, h: usize, w: usize, got_h: usize, got_w: usize },
    #[error("empty storyboard")]
    EmptyStoryboard,
    #[error("invalid frame data: {0}")]
    InvalidData(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One RGB frame stored planar: the full R plane, then G, then B.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub planes: Vec<u8>,
}

impl Frame {
    pub fn new(index: usize, height: usize, width: usize, planes: Vec<u8>) -> Result<Frame, FsvrError> {
        if planes.len() != 3 * height * width {
            return Err(FsvrError::InvalidData(format!(
                "frame {index}: {} bytes for {height}x{width}",
                planes.len()
            )));
        }
        Ok(Frame { index, height, width, planes })
    }

    pub fn filled(index: usize, height: usize, width: usize, rgb: [u8; 3]) -> Frame {
        let n = height * width;
        let mut planes = Vec::with_capacity(3 * n);
        for c in rgb {
            planes.extend(std::iter::repeat_n(c, n));
        }
        Frame { index, height, width, planes }
    }

    /// Channel value at row `y`, column `x`.
    pub fn at(&self, channel: usize, y: usize, x: usize) -> u8 {
        self.planes[channel * self.height * self.width + y * self.width + x]
    }
}

fn check_dims(frames: &[Frame]) -> Result<(), FsvrError> {
    let first = frames.first().ok_or(FsvrError::EmptySequence)?;
    for f in frames {
        if f.height != first.height || f.width != first.width || f.planes.len() != first.planes.len() {
            return Err(FsvrError::MismatchedDimensions {
                index: f.index,
                h: first.height,
                w: first.width,
                got_h: f.height,
                got_w: f.width,
            });
        }
    }
    Ok(())
}

/// Mean absolute per-pixel, per-channel difference to the previous frame, on
/// the 0..=255 scale. `cv[0]` is 0.
pub fn content_values(frames: &[Frame]) -> Result<Vec<f64>, FsvrError> {
    check_dims(frames)?;
    let mut cv = Vec::with_capacity(frames.len());
    cv.push(0.0);
    for pair in frames.windows(2) {
        let total: u64 = pair[0]
            .planes
            .iter()
            .zip(&pair[1].planes)
            .map(|(a, b)| u64::from(a.abs_diff(*b)))
            .sum();
        cv.push(total as f64 / pair[1].planes.len() as f64);
    }
    Ok(cv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub adaptive_threshold: f64,
    pub min_scene_len: usize,
    pub window_width: usize,
    pub min_content_val: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { adaptive_threshold: 2.0, min_scene_len: 10, window_width: 2, min_content_val: 15.0 }
    }
}

const RATIO_FLOOR: f64 = 1e-6;

/// Cut starts, always beginning with frame 0; scene `i` spans
/// `[cuts[i], cuts[i+1])` and the last scene runs to `frame_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneList {
    pub frame_count: usize,
    pub cuts: Vec<usize>,
}

impl SceneList {
    pub fn scenes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cuts
            .iter()
            .enumerate()
            .map(|(i, &start)| (start, self.cuts.get(i + 1).copied().unwrap_or(self.frame_count)))
    }

    pub fn len(&self) -> usize {
        self.cuts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    /// Maps scenes onto a session timeline, with frame `f` at
    /// `t_offset + f / fps`.
    pub fn windows(&self, video_id: &str, fps: f64, t_offset: f64) -> Vec<SceneWindow> {
        self.scenes()
            .enumerate()
            .map(|(i, (s, e))| SceneWindow {
                video_id: video_id.to_string(),
                scene_index: i,
                t1: t_offset + s as f64 / fps,
                t2: t_offset + e as f64 / fps,
            })
            .collect()
    }
}

/// Adaptive ratio of frame `i`: its content value over the mean content value
/// of up to `window_width` neighbours on each side (edges truncate).
pub fn adaptive_ratio(cv: &[f64], i: usize, window_width: usize) -> f64 {
    let lo = i.saturating_sub(window_width);
    let hi = (i + window_width).min(cv.len() - 1);
    let (mut sum, mut n) = (0.0, 0usize);
    for (j, v) in cv.iter().enumerate().take(hi + 1).skip(lo) {
        if j != i {
            sum += v;
            n += 1;
        }
    }
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    cv[i] / mean.max(RATIO_FLOOR)
}

pub fn adaptive_detect(frames: &[Frame], cfg: &DetectorConfig) -> Result<SceneList, FsvrError> {
    if frames.is_empty() {
        return Err(FsvrError::EmptySequence);
    }
    let cv = content_values(frames)?;
    Ok(detect_from_content(&cv, cfg))
}

/// The cut rule applied to precomputed content values. Sequential by nature:
/// suppression depends on the previous accepted cut.
pub fn detect_from_content(cv: &[f64], cfg: &DetectorConfig) -> SceneList {
    let mut cuts = vec![0usize];
    for i in 1..cv.len() {
        let last = *cuts.last().expect("cuts starts with 0");
        if i - last < cfg.min_scene_len || cv[i] < cfg.min_content_val {
            continue;
        }
        if adaptive_ratio(cv, i, cfg.window_width) >= cfg.adaptive_threshold {
            cuts.push(i);
        }
    }
    SceneList { frame_count: cv.len(), cuts }
}

/// Keyframes plus the fixed-length selection for one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Storyboard {
    pub video_id: String,
    pub keyframes: Vec<usize>,
    pub selected8: Vec<usize>,
}

pub const SELECTED_FRAMES: usize = 8;

/// Middle frame of each scene: `floor((start + end - 1) / 2)`.
pub fn keyframes(scenes: &SceneList) -> Vec<usize> {
    scenes.scenes().map(|(s, e)| (s + e - 1) / 2).collect()
}

/// Picks exactly eight keyframes. More than eight: positions
/// `round(k·(m−1)/7)`; fewer: cyclic repetition.
pub fn select_8(keyframes: &[usize]) -> Result<Vec<usize>, FsvrError> {
    let m = keyframes.len();
    if m == 0 {
        return Err(FsvrError::EmptyStoryboard);
    }
    let n = SELECTED_FRAMES;
    Ok(if m >= n {
        (0..n)
            .map(|k| {
                // round(k(m-1)/(n-1)) with halves rounded up, in integers
                let pos = (2 * k * (m - 1) + (n - 1)) / (2 * (n - 1));
                keyframes[pos]
            })
            .collect()
    } else {
        (0..n).map(|k| keyframes[k % m]).collect()
    })
}

pub fn storyboard(video_id: &str, scenes: &SceneList) -> Result<Storyboard, FsvrError> {
    let keyframes = keyframes(scenes);
    let selected8 = select_8(&keyframes)?;
    Ok(Storyboard { video_id: video_id.to_string(), keyframes, selected8 })
}

/// Sidecar describing a raw planar RGB frame file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub h: usize,
    pub w: usize,
    pub frame_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_offset: Option<f64>,
}

pub fn read_frames<R: Read>(mut reader: R, meta: &FrameMeta) -> Result<Vec<Frame>, FsvrError> {
    let frame_bytes = 3 * meta.h * meta.w;
    if frame_bytes == 0 {
        return Err(FsvrError::InvalidData("zero frame size".into()));
    }
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;
    if data.len() != frame_bytes * meta.frame_count {
        return Err(FsvrError::InvalidData(format!(
            "expected {} bytes for {} frames of {}x{}, found {}",
            frame_bytes * meta.frame_count,
            meta.frame_count,
            meta.h,
            meta.w,
            data.len()
        )));
    }
    Ok(data
        .chunks_exact(frame_bytes)
        .enumerate()
        .map(|(i, c)| Frame { index: i, height: meta.h, width: meta.w, planes: c.to_vec() })
        .collect())
}

pub fn write_frames<W: Write>(mut writer: W, frames: &[Frame]) -> Result<FrameMeta, FsvrError> {
    check_dims(frames)?;
    for f in frames {
        writer.write_all(&f.planes)?;
    }
    writer.flush()?;
    Ok(FrameMeta { h: frames[0].height, w: frames[0].width, frame_count: frames.len(), video_id: None, fps: None, t_offset: None })
}

/// JSON document emitted by scene detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutput {
    pub video_id: String,
    pub config: DetectorConfig,
    pub scenes: SceneList,
    pub storyboard: Storyboard,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scene_windows: Vec<SceneWindow>,
}
