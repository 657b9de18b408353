//! Segment-based frame sampling for training and the multi-view test
//! protocol.

use rand::Rng;

use crate::error::{Error, Result};
use crate::video::VideoClip;

/// Spatial window `(top, left, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Crop {
    pub fn center(frame_h: usize, frame_w: usize, size: usize) -> Result<Self> {
        if size > frame_h || size > frame_w {
            return Err(Error::Data(format!("crop {size} larger than frame {frame_h}x{frame_w}")));
        }
        Ok(Self {
            top: (frame_h - size) / 2,
            left: (frame_w - size) / 2,
            height: size,
            width: size,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SamplePlan {
    pub frames: Vec<usize>,
    pub crop: Crop,
    /// Temporal clip index within the view set (0 for training samples).
    pub clip: usize,
    /// Number of views the plan belongs to.
    pub views: usize,
}

impl SamplePlan {
    pub fn apply(&self, clip: &VideoClip) -> Result<VideoClip> {
        clip.select(&self.frames, (self.crop.top, self.crop.left, self.crop.height, self.crop.width))
    }
}

fn segment_bounds(len: usize, segments: usize, j: usize) -> (usize, usize) {
    (j * len / segments, (j + 1) * len / segments)
}

/// One uniformly random frame from each of `t` equal segments.
pub fn train_sample(video_len: usize, t: usize, crop: Crop, rng: &mut impl Rng) -> Result<SamplePlan> {
    if t == 0 || video_len < t {
        return Err(Error::Data(format!("cannot draw {t} segments from {video_len} frames")));
    }
    let frames = (0..t)
        .map(|j| {
            let (a, b) = segment_bounds(video_len, t, j);
            rng.gen_range(a..b)
        })
        .collect();
    Ok(SamplePlan { frames, crop, clip: 0, views: 1 })
}

/// Centre frames of each segment; used where augmentation is off.
pub fn center_sample(video_len: usize, t: usize, crop: Crop) -> Result<SamplePlan> {
    if t == 0 || video_len < t {
        return Err(Error::Data(format!("cannot draw {t} segments from {video_len} frames")));
    }
    let frames = (0..t)
        .map(|j| {
            let (a, b) = segment_bounds(video_len, t, j);
            a + (b - a) / 2
        })
        .collect();
    Ok(SamplePlan { frames, crop, clip: 0, views: 1 })
}

/// Spatial crops along the longer side: left/centre/right for landscape
/// frames, top/centre/bottom otherwise.
pub fn crops(frame_h: usize, frame_w: usize, size: usize, count: usize) -> Result<Vec<Crop>> {
    if size > frame_h || size > frame_w {
        return Err(Error::Data(format!("crop {size} larger than frame {frame_h}x{frame_w}")));
    }
    if count == 0 {
        return Err(Error::Data("at least one crop is required".into()));
    }
    let center = Crop::center(frame_h, frame_w, size)?;
    if count == 1 {
        return Ok(vec![center]);
    }
    let landscape = frame_w > frame_h;
    let span = if landscape { frame_w - size } else { frame_h - size };
    Ok((0..count)
        .map(|i| {
            let off = i * span / (count - 1);
            if landscape {
                Crop { left: off, ..center }
            } else {
                Crop { top: off, ..center }
            }
        })
        .collect())
}

/// `clips × crops` views. Temporal clip `i` takes the first frame of the
/// `i`-th sub-segment of every segment.
pub fn test_views(
    video_len: usize,
    t: usize,
    clips: usize,
    crop_count: usize,
    frame: (usize, usize),
    input_size: usize,
) -> Result<Vec<SamplePlan>> {
    if t == 0 || clips == 0 || video_len < clips * t {
        return Err(Error::Data(format!(
            "{video_len} frames cannot supply {clips} clips of {t} segments"
        )));
    }
    let crop_set = crops(frame.0, frame.1, input_size, crop_count)?;
    let views = clips * crop_set.len();
    let mut out = Vec::with_capacity(views);
    for i in 0..clips {
        let frames: Vec<usize> = (0..t)
            .map(|j| {
                let (a, b) = segment_bounds(video_len, t, j);
                a + i * (b - a) / clips
            })
            .collect();
        for &crop in &crop_set {
            out.push(SamplePlan {
                frames: frames.clone(),
                crop,
                clip: i,
                views,
            });
        }
    }
    Ok(out)
}
