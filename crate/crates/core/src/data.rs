//! Synthetic moving-shape videos with motion-defined classes.
//!
//! Every class pairs with a sibling that is its exact time reversal
//! (left/right, up/down, grow/shrink, clockwise/counter-clockwise), so any
//! single frame is ambiguous between siblings and only temporal order
//! separates them. Domains differ in illumination, sensor noise, background
//! texture and shape palette.
//!
//! Datasets persist in the `UVD1` layout (all integers little-endian):
//!
//! ```text
//! "UVD1" | version u8 | 3 reserved bytes
//! count u32 | channels u32 | frames u32 | height u32 | width u32
//! domain-spec JSON length u32 | JSON bytes
//! count × (C·T·H·W f32)        clip payloads
//! count × i32                  labels, -1 when withheld
//! manifest length u32 | UTF-8 class names, one per line
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_exact, write_atomic};
use crate::video::{Domain, VideoClip};

pub const UVD_MAGIC: &[u8; 4] = b"UVD1";
pub const UVD_VERSION: u8 = 1;

/// The eight motion classes, in label order. Odd labels are the time
/// reversal of the preceding even label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    TranslateLeft,
    TranslateRight,
    TranslateUp,
    TranslateDown,
    Grow,
    Shrink,
    OrbitClockwise,
    OrbitCounterClockwise,
}

impl Motion {
    pub const ALL: [Motion; 8] = [
        Motion::TranslateLeft,
        Motion::TranslateRight,
        Motion::TranslateUp,
        Motion::TranslateDown,
        Motion::Grow,
        Motion::Shrink,
        Motion::OrbitClockwise,
        Motion::OrbitCounterClockwise,
    ];

    pub fn label(self) -> usize {
        Motion::ALL.iter().position(|&m| m == self).unwrap()
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Motion::ALL.get(label).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Motion::TranslateLeft => "translate left",
            Motion::TranslateRight => "translate right",
            Motion::TranslateUp => "translate up",
            Motion::TranslateDown => "translate down",
            Motion::Grow => "grow",
            Motion::Shrink => "shrink",
            Motion::OrbitClockwise => "orbit clockwise",
            Motion::OrbitCounterClockwise => "orbit counter-clockwise",
        }
    }

    /// The time-reversed sibling class.
    pub fn sibling(self) -> Self {
        Motion::ALL[self.label() ^ 1]
    }

    fn is_reversed(self) -> bool {
        self.label().is_multiple_of(2)
    }
}

pub fn class_names() -> Vec<String> {
    Motion::ALL.iter().map(|m| m.name().to_string()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Square,
    Diamond,
}

/// Nuisance parameters of one rendering domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    /// Multiplies the whole scene, in `(0, 1]`.
    pub illumination: f32,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise_sigma: f32,
    /// 0 flat, 1 horizontal stripes, 2 checkerboard, 3 diagonal stripes,
    /// 4 vertical stripes.
    pub texture: u32,
    pub palette: Vec<ShapeKind>,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.illumination > 0.0 && self.illumination <= 1.0) {
            return Err(Error::config(format!(
                "illumination must lie in (0, 1], got {}",
                self.illumination
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise sigma must be non-negative"));
        }
        if self.texture > 4 {
            return Err(Error::config(format!("unknown texture id {}", self.texture)));
        }
        if self.palette.is_empty() {
            return Err(Error::config("shape palette is empty"));
        }
        Ok(())
    }

    /// Bright, clean, flat background.
    pub fn default_source(seed: u64) -> Self {
        Self {
            domain: Domain::Source,
            illumination: 1.0,
            noise_sigma: 0.02,
            texture: 0,
            palette: vec![ShapeKind::Disk, ShapeKind::Square],
            seed,
        }
    }

    /// Low-illumination, noisy, striped background.
    pub fn default_target(seed: u64) -> Self {
        Self {
            domain: Domain::Target,
            illumination: 0.3,
            noise_sigma: 0.08,
            texture: 1,
            palette: vec![ShapeKind::Disk, ShapeKind::Diamond],
            seed,
        }
    }

    /// Broad mixture for teacher pre-training: every illumination level and
    /// background of the other domains plus unseen ones, all shapes.
    pub fn pretrain_mixture(seed: u64) -> Vec<Self> {
        let mut out = Vec::new();
        for (i, &illumination) in [1.0f32, 0.6, 0.3].iter().enumerate() {
            for texture in 0..5u32 {
                out.push(Self {
                    domain: Domain::Pretrain,
                    illumination,
                    noise_sigma: 0.05,
                    texture,
                    palette: vec![ShapeKind::Disk, ShapeKind::Square, ShapeKind::Diamond],
                    seed: derive_seed(seed, i as u64, texture as u64),
                });
            }
        }
        out
    }

    /// The teacher's own rendering domain, distinct from both of the above.
    pub fn default_pretrain(seed: u64) -> Self {
        Self {
            domain: Domain::Pretrain,
            illumination: 0.6,
            noise_sigma: 0.05,
            texture: 2,
            palette: vec![ShapeKind::Disk, ShapeKind::Square, ShapeKind::Diamond],
            seed,
        }
    }
}

/// Size and extent of generated clips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ClipGeometry {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 16,
            width: 16,
        }
    }
}

const TEXTURE_CONTRAST: f32 = 0.3;

fn texture(id: u32, y: usize, x: usize) -> f32 {
    let on = match id {
        0 => return 0.0,
        1 => (y / 2).is_multiple_of(2),
        2 => ((y / 2) + (x / 2)).is_multiple_of(2),
        3 => ((x + y) / 2).is_multiple_of(2),
        _ => (x / 2).is_multiple_of(2),
    };
    if on {
        TEXTURE_CONTRAST
    } else {
        0.0
    }
}

/// Fractional coverage of pixel `(px, py)` by a shape centred at `(cx, cy)`.
fn coverage(kind: ShapeKind, cx: f32, cy: f32, r: f32, px: f32, py: f32) -> f32 {
    let (dx, dy) = (px - cx, py - cy);
    let d = match kind {
        ShapeKind::Disk => (dx * dx + dy * dy).sqrt(),
        ShapeKind::Square => dx.abs().max(dy.abs()),
        ShapeKind::Diamond => (dx.abs() + dy.abs()) * 0.75,
    };
    (r - d + 0.5).clamp(0.0, 1.0)
}

/// Mixes a seed with stream identifiers (splitmix64 finalizer).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one clip of `motion`. For a given `seed`, a class and its
/// sibling are exact time reversals of each other, noise included.
pub fn render_clip(spec: &DomainSpec, geom: ClipGeometry, motion: Motion, seed: u64) -> Result<VideoClip> {
    spec.validate()?;
    let ClipGeometry { frames, height, width } = geom;
    if frames < 2 || height < 8 || width < 8 {
        return Err(Error::dim(format!("clip geometry {geom:?} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = spec.palette[rng.gen_range(0..spec.palette.len())];
    let (h, w) = (height as f32, width as f32);
    let (mx, my) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let span_x = w * 0.7;
    let span_y = h * 0.7;
    // Pixel-sized quantities are tuned for 16 pixels and scale with the frame.
    let k = w.min(h) / 16.0;
    // Shared nuisance draws so every motion consumes the same stream.
    let j1: f32 = rng.gen_range(-1.0..1.0);
    let j2: f32 = rng.gen_range(-1.0..1.0);
    let radius: f32 = rng.gen_range(1.6..2.4);
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);

    // Canonical trajectory of the odd label; even labels play it backwards.
    let canonical = match motion {
        Motion::TranslateLeft | Motion::TranslateRight => Motion::TranslateRight,
        Motion::TranslateUp | Motion::TranslateDown => Motion::TranslateDown,
        Motion::Grow | Motion::Shrink => Motion::Shrink,
        _ => Motion::OrbitCounterClockwise,
    };
    // Each motion pair has its own size range, so single frames carry the
    // pair but not the direction.
    let pose = |u: f32| -> (f32, f32, f32) {
        match canonical {
            Motion::TranslateRight => (mx + (u - 0.5) * span_x + j1 * k, my + j2 * 1.5 * k, radius * k),
            Motion::TranslateDown => (mx + j2 * 1.5 * k, my + (u - 0.5) * span_y + j1 * k, radius * k),
            Motion::Shrink => (mx + j2 * 1.5 * k, my + j1 * 1.5 * k, (2.6 + 0.4 * j1) * k + (1.0 - u) * (w * 0.22)),
            _ => {
                let a = phase + u * std::f32::consts::PI;
                let rad = w * 0.3;
                (mx + rad * a.cos(), my - rad * a.sin(), radius * 0.6 * k)
            }
        }
    };
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let plane = height * width;
    let mut data = vec![0.0f32; frames * plane];
    for f in 0..frames {
        let u = f as f32 / (frames - 1) as f32;
        let (cx, cy, r) = pose(u);
        for y in 0..height {
            for x in 0..width {
                let cov = coverage(kind, cx, cy, r, x as f32, y as f32);
                let bg = texture(spec.texture, y, x);
                data[f * plane + y * width + x] = spec.illumination * (bg * (1.0 - cov) + cov);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let clip = VideoClip::new([1, frames, height, width], data, Some(motion.label()), spec.domain)?;
    Ok(if motion.is_reversed() {
        clip.time_reversed()
    } else {
        clip
    })
}

/// A generated (or loaded) dataset. Labels are always present in memory
/// for evaluation; training code only sees them through [`LabeledSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DomainSpec,
    pub class_names: Vec<String>,
    clips: Vec<VideoClip>,
    labels_withheld: bool,
}

/// Clips with ground-truth labels, usable for supervised training.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    clips: Vec<VideoClip>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(clips: Vec<VideoClip>) -> Result<Self> {
        let labels = clips
            .iter()
            .map(|c| c.label().ok_or_else(|| Error::Data("labeled set contains an unlabeled clip".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips, labels })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clip(&self, i: usize) -> &VideoClip {
        &self.clips[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn clips(&self) -> &[VideoClip] {
        &self.clips
    }
}

/// Clips with labels stripped. Target-domain training only ever gets this.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    clips: Vec<VideoClip>,
}

impl UnlabeledSet {
    pub fn new(clips: impl IntoIterator<Item = VideoClip>) -> Self {
        Self {
            clips: clips.into_iter().map(|c| c.without_label()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clip(&self, i: usize) -> &VideoClip {
        &self.clips[i]
    }

    pub fn clips(&self) -> &[VideoClip] {
        &self.clips
    }

    /// Union of two unlabeled pools (used for mixed-domain pre-training).
    pub fn concat(&self, other: &UnlabeledSet) -> UnlabeledSet {
        UnlabeledSet {
            clips: self.clips.iter().chain(&other.clips).cloned().collect(),
        }
    }
}

/// Generates `n_per_class` clips for each motion class in `classes`.
pub fn generate(
    spec: &DomainSpec,
    classes: &[Motion],
    n_per_class: usize,
    geom: ClipGeometry,
) -> Result<SyntheticDataset> {
    spec.validate()?;
    let clips = (0..n_per_class * classes.len())
        .into_par_iter()
        .map(|j| {
            let (i, m) = (j / classes.len(), classes[j % classes.len()]);
            render_clip(spec, geom, m, derive_seed(spec.seed, m.label() as u64, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        class_names: class_names(),
        clips,
        labels_withheld: false,
    })
}

impl SyntheticDataset {
    pub fn from_clips(spec: DomainSpec, class_names: Vec<String>, clips: Vec<VideoClip>) -> Self {
        let labels_withheld = clips.iter().all(|c| c.label().is_none());
        Self {
            spec,
            class_names,
            clips,
            labels_withheld,
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clips(&self) -> &[VideoClip] {
        &self.clips
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn geometry(&self) -> Option<ClipGeometry> {
        self.clips.first().map(|c| ClipGeometry {
            frames: c.frames(),
            height: c.height(),
            width: c.width(),
        })
    }

    pub fn labeled(&self) -> Result<LabeledSet> {
        LabeledSet::new(self.clips.clone())
    }

    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet::new(self.clips.iter().cloned())
    }

    /// Marks labels as withheld: they are written as -1 on save.
    pub fn withhold_labels(mut self) -> Self {
        self.labels_withheld = true;
        self
    }

    pub fn labels_withheld(&self) -> bool {
        self.labels_withheld
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let first = self
            .clips
            .first()
            .ok_or_else(|| Error::Data("cannot serialize an empty dataset".into()))?;
        let dims = first.dims();
        let mut out = Vec::new();
        out.extend_from_slice(UVD_MAGIC);
        out.extend_from_slice(&[UVD_VERSION, 0, 0, 0]);
        out.extend_from_slice(&(self.clips.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let spec = serde_json::to_vec(&self.spec)?;
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        for c in &self.clips {
            if c.dims() != dims {
                return Err(Error::dim("all clips in a dataset must share dimensions"));
            }
            for v in c.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for c in &self.clips {
            let l = match (self.labels_withheld, c.label()) {
                (false, Some(l)) => l as i32,
                _ => -1,
            };
            out.extend_from_slice(&l.to_le_bytes());
        }
        let manifest = self.class_names.join("\n");
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut head = [0u8; 8];
        read_exact(&mut r, &mut head, "dataset header")?;
        if &head[..4] != UVD_MAGIC {
            return Err(Error::format("bad dataset magic"));
        }
        if head[4] != UVD_VERSION {
            return Err(Error::UnsupportedVersion {
                found: head[4] as u32,
                expected: UVD_VERSION as u32,
            });
        }
        let count = read_u32(&mut r)? as usize;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r)? as usize;
        }
        let spec_len = read_u32(&mut r)? as usize;
        let mut spec = vec![0u8; spec_len.min(bytes.len())];
        read_exact(&mut r, &mut spec, "domain spec")?;
        let spec: DomainSpec =
            serde_json::from_slice(&spec).map_err(|e| Error::format(format!("domain spec: {e}")))?;
        let per_clip = dims.iter().product::<usize>();
        let payload = count
            .checked_mul(per_clip)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("dataset size overflows"))?;
        if payload > bytes.len() {
            return Err(Error::format("truncated clip payload"));
        }
        let mut raw = vec![0u8; payload];
        read_exact(&mut r, &mut raw, "clip payload")?;
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "labels")?;
            labels.push(i32::from_le_bytes(b));
        }
        let manifest_len = read_u32(&mut r)? as usize;
        let mut manifest = vec![0u8; manifest_len.min(bytes.len())];
        read_exact(&mut r, &mut manifest, "class manifest")?;
        let manifest = String::from_utf8(manifest).map_err(|_| Error::format("manifest is not UTF-8"))?;
        let class_names: Vec<String> = manifest.lines().map(str::to_string).collect();

        let labels_withheld = labels.iter().all(|&l| l < 0);
        let mut clips = Vec::with_capacity(count);
        for (i, &l) in labels.iter().enumerate() {
            let data = raw[i * per_clip * 4..(i + 1) * per_clip * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let label = if l >= 0 {
                if l as usize >= class_names.len() {
                    return Err(Error::format(format!("label {l} outside the class manifest")));
                }
                Some(l as usize)
            } else {
                None
            };
            clips.push(VideoClip::new(dims, data, label, spec.domain)?);
        }
        Ok(Self {
            spec,
            class_names,
            clips,
            labels_withheld,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "dataset header")?;
    Ok(u32::from_le_bytes(b))
}

/// Writes the class manifest as UTF-8 lines.
pub fn write_manifest(path: &Path, names: &[String]) -> Result<()> {
    let mut text = names.join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let mut s = String::new();
    fs::File::open(path)?.read_to_string(&mut s)?;
    Ok(s.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}
