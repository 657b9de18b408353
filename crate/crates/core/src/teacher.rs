//! The frozen spatial teacher: a per-frame transformer with a CLS token.
//!
//! It supplies per-layer patch features for distillation, the final-layer
//! CLS attention used to guide masking, and zero-shot video predictions by
//! cosine similarity against class prototypes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::data::{render_clip, ClipGeometry, DomainSpec, LabeledSet, Motion};
use crate::error::{Error, Result};
use crate::masking::AttentionMap;
use crate::nn::{block_forward, linear, sinusoidal_positions, trunc_normal, xavier_std, BlockParams, ParamGroup, ParamStore};
use crate::optim::{adamw_step, lr_at, AdamState};
use crate::tensor::{softmax_rows, Tape, Tensor, Var};
use crate::video::VideoClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub frame_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Cosine scores are divided by this before the zero-shot softmax.
    pub temperature: f32,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            frame_size: 16,
            patch_size: 8,
            channels: 1,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 8,
            temperature: 0.07,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.frame_size.is_multiple_of(self.patch_size) {
            return Err(Error::config("teacher frame_size must be a multiple of patch_size"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) || self.depth == 0 {
            return Err(Error::config("teacher embed_dim must divide into heads and depth > 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("teacher temperature must be positive"));
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        let s = self.frame_size / self.patch_size;
        s * s
    }
}

/// Teacher outputs for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEncoding {
    /// Patch features `[patches × d_t]` of every block output, first to last.
    pub layers: Vec<Tensor>,
    /// Final normalized CLS embedding.
    pub cls: Vec<f32>,
    /// Final-layer CLS→patch attention, head-averaged, summing to 1.
    pub attention: Vec<f32>,
}

/// Unit-norm class embeddings used as zero-shot classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    pub names: Vec<String>,
    pub vectors: Tensor,
}

impl ClassPrototypes {
    pub fn new(names: Vec<String>, vectors: Tensor) -> Result<Self> {
        let (n, d) = vectors.dims2()?;
        if n == 0 || n != names.len() {
            return Err(Error::config(format!("{n} prototypes for {} class names", names.len())));
        }
        let mut data = vectors.into_data();
        for row in data.chunks_exact_mut(d) {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::config("zero prototype vector"));
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
        Ok(Self {
            names,
            vectors: Tensor::new(vec![n, d], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: json!({"kind": "prototypes", "names": self.names}),
            tensors: vec![("prototypes".into(), self.vectors.clone())],
        }
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.header.get("kind").and_then(Value::as_str) != Some("prototypes") {
            return Err(Error::format("checkpoint does not hold class prototypes"));
        }
        let names: Vec<String> = serde_json::from_value(ck.header["names"].clone())
            .map_err(|e| Error::format(format!("prototype names: {e}")))?;
        let (_, t) = ck.tensors.pop().ok_or_else(|| Error::format("prototype tensor missing"))?;
        Self::new(names, t)
    }
}

/// Zero-shot result for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShot {
    pub class: usize,
    pub confidence: f32,
    pub probs: Vec<f32>,
}

/// Averages per-frame probability vectors and takes the argmax (lowest index
/// on ties).
pub fn aggregate_frames(frame_probs: &[Vec<f32>]) -> Result<ZeroShot> {
    let first = frame_probs.first().ok_or_else(|| Error::dim("no frames to aggregate"))?;
    let c = first.len();
    let mut acc = vec![0.0f64; c];
    for p in frame_probs {
        if p.len() != c {
            return Err(Error::dim("frame probability vectors differ in length"));
        }
        acc.iter_mut().zip(p).for_each(|(a, &v)| *a += v as f64);
    }
    let probs: Vec<f32> = acc.iter().map(|&a| (a / frame_probs.len() as f64) as f32).collect();
    let (class, confidence) = argmax(&probs);
    Ok(ZeroShot { class, confidence, probs })
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    cfg: TeacherConfig,
    params: ParamStore,
    cls_token: usize,
    embed_w: usize,
    embed_b: usize,
    blocks: Vec<BlockParams>,
    norm_g: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
    positions: Vec<f32>,
}

impl TeacherModel {
    pub fn new(cfg: TeacherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let pd = cfg.channels * cfg.patch_size * cfg.patch_size;
        let mut params = ParamStore::default();
        let cls_token = params.add("cls_token", trunc_normal(&mut rng, &[1, d], 0.02), ParamGroup::Embed);
        let embed_w = params.add("embed.proj.weight", trunc_normal(&mut rng, &[pd, d], xavier_std(pd, d)), ParamGroup::Embed);
        let embed_b = params.add("embed.proj.bias", Tensor::zeros(&[d]), ParamGroup::Embed);
        let blocks = (0..cfg.depth)
            .map(|i| {
                BlockParams::init(&mut params, &format!("blocks.{i}"), ParamGroup::Block(i), d, d * cfg.mlp_ratio, &mut rng)
            })
            .collect();
        let norm_g = params.add("norm.weight", Tensor::from_fn(&[d], |_| 1.0), ParamGroup::Head);
        let norm_b = params.add("norm.bias", Tensor::zeros(&[d]), ParamGroup::Head);
        let head_w = params.add("head.weight", Tensor::zeros(&[d, cfg.num_classes]), ParamGroup::Head);
        let head_b = params.add("head.bias", Tensor::zeros(&[cfg.num_classes]), ParamGroup::Head);
        let positions = sinusoidal_positions(cfg.patches_per_frame() + 1, d);
        Ok(Self {
            cfg,
            params,
            cls_token,
            embed_w,
            embed_b,
            blocks,
            norm_g,
            norm_b,
            head_w,
            head_b,
            positions,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Test hook: mutable access for building fixtures.
    #[doc(hidden)]
    pub fn params_mut_for_fixture(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn frame_patches(&self, clip: &VideoClip, t: usize) -> Result<Tensor> {
        let [c, frames, h, w] = clip.dims();
        if c != self.cfg.channels || h != self.cfg.frame_size || w != self.cfg.frame_size {
            return Err(Error::config(format!(
                "clip frame {c}x{h}x{w} does not match teacher input {}x{}x{}",
                self.cfg.channels, self.cfg.frame_size, self.cfg.frame_size
            )));
        }
        if t >= frames {
            return Err(Error::Index(format!("frame {t} outside clip of {frames}")));
        }
        let p = self.cfg.patch_size;
        let side = self.cfg.frame_size / p;
        let mut out = Vec::with_capacity(side * side * c * p * p);
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for y in 0..p {
                        for x in 0..p {
                            out.push(clip.pixel(ch, t, py * p + y, px * p + x));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![side * side, c * p * p], out)
    }

    /// Input sequence `[1 + patches × d_t]`: CLS first, positions added.
    pub fn tokens(&self, tape: &mut Tape, p: &[Var], clip: &VideoClip, t: usize) -> Result<Var> {
        let patches = self.frame_patches(clip, t)?;
        let x = tape.constant(patches.shape().to_vec(), patches.into_data())?;
        let e = linear(tape, x, p[self.embed_w], p[self.embed_b])?;
        let seq = tape.concat_rows(&[p[self.cls_token], e])?;
        let pe = tape.constant(vec![self.cfg.patches_per_frame() + 1, self.cfg.embed_dim], self.positions.clone())?;
        tape.add(seq, pe)
    }

    /// Block outputs, final-layer attention per head, and the normalized
    /// CLS row.
    fn forward_frame(
        &self,
        tape: &mut Tape,
        p: &[Var],
        clip: &VideoClip,
        t: usize,
        keep: Option<&[usize]>,
    ) -> Result<(Vec<Var>, Vec<Var>, Var)> {
        let mut h = self.tokens(tape, p, clip, t)?;
        if let Some(keep) = keep {
            let rows: Vec<usize> = std::iter::once(0).chain(keep.iter().map(|&k| k + 1)).collect();
            h = tape.gather_rows(h, &rows)?;
        }
        let mut outs = Vec::with_capacity(self.cfg.depth);
        let mut attn = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let last = i + 1 == self.blocks.len();
            let o = block_forward(tape, p, b, h, self.cfg.heads, last)?;
            h = o.out;
            outs.push(h);
            if last {
                attn = o.attention;
            }
        }
        let cls = tape.gather_rows(h, &[0])?;
        let cls = tape.layer_norm(cls, p[self.norm_g], p[self.norm_b])?;
        Ok((outs, attn, cls))
    }

    pub fn encode_frame(&self, clip: &VideoClip, t: usize) -> Result<FrameEncoding> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (outs, attn, cls) = self.forward_frame(&mut tape, &p, clip, t, None)?;
        let n = self.cfg.patches_per_frame();
        let d = self.cfg.embed_dim;
        let layers = outs
            .iter()
            .map(|&o| Tensor::new(vec![n, d], tape.value(o)[d..].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let mut acc = vec![0.0f64; n];
        for &a in &attn {
            // Row 0 of each head's attention is the CLS query.
            let row = &tape.value(a)[..n + 1];
            acc.iter_mut().zip(&row[1..]).for_each(|(s, &v)| *s += v as f64);
        }
        let total: f64 = acc.iter().sum();
        let attention = if total > 0.0 {
            acc.iter().map(|&v| (v / total) as f32).collect()
        } else {
            vec![1.0 / n as f32; n]
        };
        Ok(FrameEncoding {
            layers,
            cls: tape.value(cls).to_vec(),
            attention,
        })
    }

    /// Encodes every frame of `clip` independently.
    pub fn encode_frames(&self, clip: &VideoClip) -> Result<Vec<FrameEncoding>> {
        (0..clip.frames()).map(|t| self.encode_frame(clip, t)).collect()
    }

    /// Per-frame CLS attention maps for the frames of `clip`.
    pub fn cls_attention_map(&self, clip: &VideoClip) -> Result<AttentionMap> {
        let enc = self.encode_frames(clip)?;
        attention_map(&enc.iter().collect::<Vec<_>>())
    }

    /// Softmax over temperature-scaled cosine similarities of one CLS
    /// embedding against every prototype.
    pub fn frame_probs(&self, cls: &[f32], protos: &ClassPrototypes) -> Result<Vec<f32>> {
        let (n, d) = protos.vectors.dims2()?;
        if d != cls.len() {
            return Err(Error::dim(format!("CLS of {} dims against {d}-dim prototypes", cls.len())));
        }
        let norm = cls.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        let scores: Vec<f32> = (0..n)
            .map(|c| {
                let cos = protos.vectors.row(c).iter().zip(cls).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / norm;
                (cos / self.cfg.temperature as f64) as f32
            })
            .collect();
        Ok(softmax_rows(&scores, n))
    }

    /// Zero-shot prediction for all frames of `clip`.
    pub fn zero_shot_classify(&self, clip: &VideoClip, protos: &ClassPrototypes) -> Result<ZeroShot> {
        if protos.is_empty() {
            return Err(Error::config("no class prototypes"));
        }
        let enc = self.encode_frames(clip)?;
        self.zero_shot_from(&enc.iter().collect::<Vec<_>>(), protos)
    }

    /// Zero-shot prediction from already encoded frames.
    pub fn zero_shot_from(&self, frames: &[&FrameEncoding], protos: &ClassPrototypes) -> Result<ZeroShot> {
        let probs = frames
            .iter()
            .map(|f| self.frame_probs(&f.cls, protos))
            .collect::<Result<Vec<_>>>()?;
        aggregate_frames(&probs)
    }

    /// Prototype per class: normalized mean CLS embedding over the first
    /// half of the frames of `exemplars` clips rendered in each of `specs`.
    /// Siblings share exemplar seeds, so their prototypes come from opposite
    /// halves of the same trajectories.
    pub fn build_prototypes(&self, specs: &[DomainSpec], geom: ClipGeometry, exemplars: usize, names: Vec<String>) -> Result<ClassPrototypes> {
        if specs.is_empty() || exemplars == 0 {
            return Err(Error::config("prototypes need at least one domain and one exemplar"));
        }
        let d = self.cfg.embed_dim;
        let half = (geom.frames / 2).max(1);
        let mut data = Vec::with_capacity(Motion::ALL.len() * d);
        for m in Motion::ALL {
            let mut acc = vec![0.0f64; d];
            for spec in specs {
                for e in 0..exemplars {
                    let seed = crate::data::derive_seed(spec.seed ^ 0x5eed_9e07, (m.label() / 2) as u64, e as u64);
                    let clip = render_clip(spec, geom, m, seed)?;
                    for t in 0..half {
                        let enc = self.encode_frame(&clip, t)?;
                        acc.iter_mut().zip(&enc.cls).for_each(|(a, &v)| *a += v as f64);
                    }
                }
            }
            let n = (specs.len() * exemplars * half) as f64;
            data.extend(acc.iter().map(|&a| (a / n) as f32));
        }
        ClassPrototypes::new(names, Tensor::new(vec![Motion::ALL.len(), d], data)?)
    }

    pub fn to_checkpoint(&self, metadata: Value) -> Checkpoint {
        Checkpoint {
            header: json!({"kind": "teacher", "config": self.cfg, "metadata": metadata}),
            tensors: self.params.names().iter().cloned().zip(self.params.tensors().iter().cloned()).collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.header.get("kind").and_then(Value::as_str) != Some("teacher") {
            return Err(Error::format("checkpoint does not hold a teacher"));
        }
        let cfg: TeacherConfig = serde_json::from_value(ck.header["config"].clone())
            .map_err(|e| Error::format(format!("teacher config: {e}")))?;
        let mut t = Self::new(cfg, 0)?;
        t.params.load_values(ck.tensors)?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(Value::Null).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Builds an attention map from encoded frames, in the given order.
pub fn attention_map(frames: &[&FrameEncoding]) -> Result<AttentionMap> {
    let n = frames.first().map(|f| f.attention.len()).ok_or_else(|| Error::dim("no frames"))?;
    let w: Vec<f32> = frames.iter().flat_map(|f| f.attention.iter().copied()).collect();
    AttentionMap::new(frames.len(), n, w)
}

/// Per-frame supervised training of the surrogate teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub steps: u64,
    pub batch_frames: usize,
    pub base_lr: f32,
    pub warmup: u64,
    pub betas: (f32, f32),
    pub weight_decay: f32,
    /// Fraction of patch tokens each training frame keeps.
    #[serde(default = "one")]
    pub token_keep: f32,
    pub seed: u64,
}

fn one() -> f32 {
    1.0
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch_frames: 32,
            base_lr: 2e-3,
            warmup: 40,
            betas: (0.9, 0.999),
            weight_decay: 0.05,
            token_keep: 1.0,
            seed: 0,
        }
    }
}

/// Trains a fresh teacher with per-frame cross entropy on `data`, returning
/// it frozen together with the per-step losses.
pub fn train_teacher(cfg: TeacherConfig, data: &LabeledSet, tc: &TeacherTrainConfig) -> Result<(TeacherModel, Vec<f32>)> {
    if data.is_empty() {
        return Err(Error::Data("teacher training set is empty".into()));
    }
    let mut teacher = TeacherModel::new(cfg, tc.seed)?;
    let mut state = AdamState::for_store(&teacher.params);
    let scales = vec![1.0f32; teacher.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7eac_4e12);
    let mut losses = Vec::with_capacity(tc.steps as usize);
    for step in 0..tc.steps {
        let mut tape = Tape::new();
        let p = teacher.params.bind(&mut tape, true);
        let mut rows = Vec::with_capacity(tc.batch_frames);
        let mut labels = Vec::with_capacity(tc.batch_frames);
        for _ in 0..tc.batch_frames {
            let i = rng.gen_range(0..data.len());
            let clip = data.clip(i);
            let t = rng.gen_range(0..clip.frames());
            let keep = (tc.token_keep < 1.0).then(|| {
                let n = teacher.cfg.patches_per_frame();
                let k = ((n as f32 * tc.token_keep).round() as usize).clamp(1, n);
                rand::seq::index::sample(&mut rng, n, k).into_vec()
            });
            let (_, _, cls) = teacher.forward_frame(&mut tape, &p, clip, t, keep.as_deref())?;
            rows.push(cls);
            labels.push(data.label(i));
        }
        let x = tape.concat_rows(&rows)?;
        let logits = linear(&mut tape, x, p[teacher.head_w], p[teacher.head_b])?;
        let loss = tape.cross_entropy(logits, &labels, &vec![1.0; labels.len()])?;
        losses.push(tape.scalar(loss));
        let grads = tape.backward(loss)?;
        teacher.params.zero_grad();
        teacher.params.accumulate(&grads, &p)?;
        let lr = lr_at(step, tc.base_lr, tc.warmup, tc.steps);
        adamw_step(&mut teacher.params, &mut state, lr, &scales, tc.betas, tc.weight_decay)?;
    }
    teacher.params.zero_grad();
    Ok((teacher, losses))
}

/// Frozen linear maps from student width to teacher width, one per aligned
/// layer, with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    pub maps: Vec<Tensor>,
}

impl Projections {
    pub fn orthogonal(count: usize, student_dim: usize, teacher_dim: usize, seed: u64) -> Result<Self> {
        if teacher_dim > student_dim {
            return Err(Error::config(format!(
                "cannot build orthonormal columns: teacher dim {teacher_dim} > student dim {student_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut maps = Vec::with_capacity(count);
        for _ in 0..count {
            // Gram-Schmidt over Gaussian columns, stored as [student × teacher].
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(teacher_dim);
            while cols.len() < teacher_dim {
                let mut v: Vec<f64> = (0..student_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                for c in &cols {
                    let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
                }
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if n > 1e-6 {
                    cols.push(v.into_iter().map(|a| a / n).collect());
                }
            }
            let t = Tensor::from_fn(&[student_dim, teacher_dim], |i| cols[i % teacher_dim][i / teacher_dim] as f32);
            maps.push(t);
        }
        Ok(Self { maps })
    }

    pub fn identity(count: usize, dim: usize) -> Self {
        Self {
            maps: (0..count).map(|_| Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 })).collect(),
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut s = ParamStore::default();
        for (i, m) in self.maps.iter().enumerate() {
            s.add(format!("proj.{i}"), m.clone(), ParamGroup::Head);
        }
        s.fingerprint()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: json!({"kind": "projections", "count": self.maps.len()}),
            tensors: self.maps.iter().enumerate().map(|(i, m)| (format!("proj.{i}"), m.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.header.get("kind").and_then(Value::as_str) != Some("projections") {
            return Err(Error::format("checkpoint does not hold projections"));
        }
        Ok(Self {
            maps: ck.tensors.into_iter().map(|(_, t)| t).collect(),
        })
    }
}
