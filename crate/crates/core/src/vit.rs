//! The student video transformer: per-frame patch embedding, fixed
//! sinusoidal positions, joint space-time attention and a mean-pool head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::masking::{apply_mask, TokenMask};
use crate::nn::{block_forward, linear, sinusoidal_positions, trunc_normal, xavier_std, BlockParams, ParamGroup, ParamStore};
use crate::tensor::{softmax_rows, Tape, Tensor, Var};
use crate::video::VideoClip;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub frame_size: usize,
    pub patch_size: usize,
    pub frames: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Disabling positions is only meant for invariance tests.
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
    /// Shifts and scales each input clip to zero mean and unit variance.
    #[serde(default)]
    pub standardize_input: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            frame_size: 16,
            patch_size: 8,
            frames: 4,
            channels: 1,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 8,
            positional_encoding: true,
            standardize_input: false,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.patch_size == 0 || self.frame_size == 0 || !self.frame_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "frame_size {} is not a multiple of patch_size {}",
                self.frame_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.frames == 0 || self.channels == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return bad("frames, channels, depth and mlp_ratio must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        let side = self.frame_size / self.patch_size;
        side * side
    }

    pub fn token_count(&self) -> usize {
        self.frames * self.patches_per_frame()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

fn standardize(v: &mut [f32]) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-6);
    v.iter_mut().for_each(|x| *x = ((*x as f64 - mean) * inv) as f32);
}

/// Cuts every frame of `clip` into non-overlapping `P×P` patches, returning
/// `[T·(H/P)² × C·P·P]` rows in frame-major, raster order.
pub fn patchify(clip: &VideoClip, frames: usize, frame_size: usize, patch: usize) -> Result<Tensor> {
    let [c, t, h, w] = clip.dims();
    if t != frames || h != frame_size || w != frame_size {
        return Err(Error::config(format!(
            "clip dims {:?} do not match model input {frames}x{frame_size}x{frame_size}",
            clip.dims()
        )));
    }
    let side = frame_size / patch;
    let pd = c * patch * patch;
    let mut out = Vec::with_capacity(t * side * side * pd);
    for f in 0..t {
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for y in 0..patch {
                        for x in 0..patch {
                            out.push(clip.pixel(ch, f, py * patch + y, px * patch + x));
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![t * side * side, pd], out)
}

/// Per-layer features over a set of retained token positions. `layers[0]`
/// is the embedding output and `layers[l]` the output of block `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T = Var> {
    pub layers: Vec<T>,
    pub positions: Vec<usize>,
}

impl<T> FeatureStack<T> {
    pub fn depth(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn layer(&self, l: usize) -> Result<&T> {
        self.layers
            .get(l)
            .ok_or_else(|| Error::Spec(format!("layer {l} missing from a stack of {}", self.layers.len())))
    }

    pub fn last(&self) -> &T {
        self.layers.last().expect("feature stacks are never empty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    cfg: ViTConfig,
    params: ParamStore,
    embed_w: usize,
    embed_b: usize,
    blocks: Vec<BlockParams>,
    norm_g: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
    positions: Vec<f32>,
    head_trained: bool,
}

impl StudentModel {
    pub fn new(cfg: ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let d = cfg.embed_dim;
        let embed_w = params.add("embed.proj.weight", trunc_normal(&mut rng, &[cfg.patch_dim(), d], xavier_std(cfg.patch_dim(), d)), ParamGroup::Embed);
        let embed_b = params.add("embed.proj.bias", Tensor::zeros(&[d]), ParamGroup::Embed);
        let blocks = (0..cfg.depth)
            .map(|i| {
                BlockParams::init(&mut params, &format!("blocks.{i}"), ParamGroup::Block(i), d, cfg.hidden_dim(), &mut rng)
            })
            .collect();
        let norm_g = params.add("norm.weight", Tensor::from_fn(&[d], |_| 1.0), ParamGroup::Head);
        let norm_b = params.add("norm.bias", Tensor::zeros(&[d]), ParamGroup::Head);
        let head_w = params.add("head.weight", Tensor::zeros(&[d, cfg.num_classes]), ParamGroup::Head);
        let head_b = params.add("head.bias", Tensor::zeros(&[cfg.num_classes]), ParamGroup::Head);
        let positions = if cfg.positional_encoding {
            sinusoidal_positions(cfg.token_count(), d)
        } else {
            vec![0.0; cfg.token_count() * d]
        };
        Ok(Self {
            cfg,
            params,
            embed_w,
            embed_b,
            blocks,
            norm_g,
            norm_b,
            head_w,
            head_b,
            positions,
            head_trained: false,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Whether the classification head has been fitted (Stage 2 done).
    pub fn head_trained(&self) -> bool {
        self.head_trained
    }

    pub fn set_head_trained(&mut self, on: bool) {
        self.head_trained = on;
    }

    /// Re-initializes the head to zeros.
    pub fn reset_head(&mut self) {
        let n = self.params.tensors()[self.head_w].numel();
        self.params.tensors_mut()[self.head_w].data_mut().copy_from_slice(&vec![0.0; n]);
        self.params.tensors_mut()[self.head_b].data_mut().fill(0.0);
        self.head_trained = false;
    }

    pub fn head_indices(&self) -> (usize, usize) {
        (self.head_w, self.head_b)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    pub fn patchify(&self, clip: &VideoClip) -> Result<Tensor> {
        if clip.channels() != self.cfg.channels {
            return Err(Error::config(format!(
                "clip has {} channels, model expects {}",
                clip.channels(),
                self.cfg.channels
            )));
        }
        patchify(clip, self.cfg.frames, self.cfg.frame_size, self.cfg.patch_size)
    }

    /// Patch projection plus positions: `[token_count × d]` on the tape.
    pub fn tokenize(&self, tape: &mut Tape, p: &[Var], clip: &VideoClip) -> Result<Var> {
        let patches = self.patchify(clip)?;
        let shape = patches.shape().to_vec();
        let mut data = patches.into_data();
        if self.cfg.standardize_input {
            standardize(&mut data);
        }
        let x = tape.constant(shape, data)?;
        let e = linear(tape, x, p[self.embed_w], p[self.embed_b])?;
        if self.cfg.positional_encoding {
            let pe = tape.constant(vec![self.cfg.token_count(), self.cfg.embed_dim], self.positions.clone())?;
            tape.add(e, pe)
        } else {
            Ok(e)
        }
    }

    /// Runs the blocks over the visible tokens only.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        p: &[Var],
        tokens: Var,
        visible: Option<&TokenMask>,
    ) -> Result<FeatureStack> {
        let (x, positions) = match visible {
            Some(mask) => apply_mask(tape, tokens, mask)?,
            None => (tokens, (0..tape.shape(tokens)[0]).collect()),
        };
        let mut layers = Vec::with_capacity(self.cfg.depth + 1);
        layers.push(x);
        let mut h = x;
        for b in &self.blocks {
            h = block_forward(tape, p, b, h, self.cfg.heads, false)?.out;
            layers.push(h);
        }
        Ok(FeatureStack { layers, positions })
    }

    /// Head over mean-pooled final features, one row per stack.
    pub fn head_logits(&self, tape: &mut Tape, p: &[Var], finals: &[Var]) -> Result<Var> {
        let pooled = finals
            .iter()
            .map(|&f| tape.mean_rows(f))
            .collect::<Result<Vec<_>>>()?;
        let x = tape.concat_rows(&pooled)?;
        let x = tape.layer_norm(x, p[self.norm_g], p[self.norm_b])?;
        linear(tape, x, p[self.head_w], p[self.head_b])
    }

    /// Logits `[B × classes]` for a batch, each clip optionally masked.
    pub fn batch_logits(
        &self,
        tape: &mut Tape,
        p: &[Var],
        clips: &[&VideoClip],
        masks: Option<&[TokenMask]>,
    ) -> Result<Var> {
        if let Some(m) = masks {
            if m.len() != clips.len() {
                return Err(Error::Batch(format!("{} masks for {} clips", m.len(), clips.len())));
            }
        }
        let mut finals = Vec::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            let tok = self.tokenize(tape, p, clip)?;
            let fs = self.forward_features(tape, p, tok, masks.map(|m| &m[i]))?;
            finals.push(*fs.last());
        }
        self.head_logits(tape, p, &finals)
    }

    /// Inference-only logits for one clip.
    pub fn classify(&self, clip: &VideoClip) -> Result<Vec<f32>> {
        self.classify_masked(clip, None)
    }

    pub fn classify_masked(&self, clip: &VideoClip, mask: Option<&TokenMask>) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let tok = self.tokenize(&mut tape, &p, clip)?;
        let fs = self.forward_features(&mut tape, &p, tok, mask)?;
        let logits = self.head_logits(&mut tape, &p, &[*fs.last()])?;
        Ok(tape.value(logits).to_vec())
    }

    pub fn predict_proba(&self, clip: &VideoClip) -> Result<Vec<f32>> {
        let l = self.classify(clip)?;
        Ok(softmax_rows(&l, l.len()))
    }

    pub fn to_checkpoint(&self, metadata: Value) -> Checkpoint {
        Checkpoint {
            header: json!({
                "kind": "student",
                "config": self.cfg,
                "head_trained": self.head_trained,
                "metadata": metadata,
            }),
            tensors: self
                .params
                .names()
                .iter()
                .cloned()
                .zip(self.params.tensors().iter().map(|t| {
                    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("consistent")
                }))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.header.get("kind").and_then(Value::as_str) != Some("student") {
            return Err(Error::format("checkpoint does not hold a student model"));
        }
        let cfg: ViTConfig = serde_json::from_value(ck.header["config"].clone())
            .map_err(|e| Error::format(format!("student config: {e}")))?;
        let mut m = Self::new(cfg, 0)?;
        m.params.load_values(ck.tensors)?;
        m.head_trained = ck.header.get("head_trained").and_then(Value::as_bool).unwrap_or(false);
        Ok(m)
    }

    pub fn save(&self, path: &Path, metadata: Value) -> Result<()> {
        self.to_checkpoint(metadata).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}
