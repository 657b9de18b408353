use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which rendering domain a clip was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Pretrain,
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Pretrain => "pretrain",
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// A dense `C×T×H×W` intensity video, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    channels: usize,
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    label: Option<usize>,
    domain: Domain,
}

impl VideoClip {
    pub fn new(
        dims: [usize; 4],
        data: Vec<f32>,
        label: Option<usize>,
        domain: Domain,
    ) -> Result<Self> {
        let [channels, frames, height, width] = dims;
        if data.len() != channels * frames * height * width {
            return Err(Error::dim(format!(
                "clip dims {dims:?} need {} values, got {}",
                channels * frames * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            frames,
            height,
            width,
            data,
            label,
            domain,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn without_label(&self) -> Self {
        Self {
            label: None,
            ..self.clone()
        }
    }

    pub fn pixel(&self, c: usize, t: usize, y: usize, x: usize) -> f32 {
        self.data[((c * self.frames + t) * self.height + y) * self.width + x]
    }

    /// One `C×H×W` frame copied out of the clip.
    pub fn frame(&self, t: usize) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(self.channels * plane);
        for c in 0..self.channels {
            let start = (c * self.frames + t) * plane;
            out.extend_from_slice(&self.data[start..start + plane]);
        }
        out
    }

    /// Builds a new clip from the given frame indices and a spatial window
    /// `(top, left, size_h, size_w)`.
    pub fn select(&self, frames: &[usize], window: (usize, usize, usize, usize)) -> Result<Self> {
        let (top, left, h, w) = window;
        if top + h > self.height || left + w > self.width {
            return Err(Error::dim(format!(
                "crop window {window:?} exceeds frame {}x{}",
                self.height, self.width
            )));
        }
        if let Some(&bad) = frames.iter().find(|&&f| f >= self.frames) {
            return Err(Error::Index(format!("frame {bad} outside clip of {} frames", self.frames)));
        }
        let mut data = Vec::with_capacity(self.channels * frames.len() * h * w);
        for c in 0..self.channels {
            for &t in frames {
                for y in top..top + h {
                    let start = ((c * self.frames + t) * self.height + y) * self.width + left;
                    data.extend_from_slice(&self.data[start..start + w]);
                }
            }
        }
        Self::new([self.channels, frames.len(), h, w], data, self.label, self.domain)
    }

    /// Same clip with its frames in reverse order.
    pub fn time_reversed(&self) -> Self {
        let rev: Vec<usize> = (0..self.frames).rev().collect();
        self.select(&rev, (0, 0, self.height, self.width))
            .expect("full window is always valid")
    }
}
