//! Stage runners and the resumable training state.
//!
//! Every run is a pure function of the stage config, the inputs and the
//! state it starts from. A run can stop at any step (`until`), be saved with
//! [`TrainState::save`] and continue later with identical results.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::{steps_per_epoch, StageConfig};
use crate::data::{derive_seed, LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::masking::{disjoint_masks, sample_mask, AttentionMap, TokenMask};
use crate::nn::ParamStore;
use crate::objectives::{cst_loss, st_loss, teacher_targets, umt_loss, AlignmentSpec, CSTBatch};
use crate::optim::{adamw_step, layer_scales, lr_at, AdamState};
use crate::pseudolabel::{confidence_weight, pseudolabel, selection_mask, AuditRow, Evidence};
use crate::sampling::{train_sample, Crop, SamplePlan};
use crate::teacher::{argmax, attention_map, ClassPrototypes, FrameEncoding, Projections, TeacherModel};
use crate::tensor::{Tape, Var};
use crate::video::VideoClip;
use crate::vit::StudentModel;

/// The frozen side of the pipeline: teacher, its class prototypes, the
/// student-to-teacher projections and the layer alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBundle {
    pub teacher: TeacherModel,
    pub prototypes: ClassPrototypes,
    pub projections: Projections,
    pub alignment: AlignmentSpec,
}

impl TeacherBundle {
    /// Hash over every frozen parameter.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.teacher.fingerprint());
        h.update(self.projections.fingerprint());
        for v in self.prototypes.vectors.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.teacher.save(&dir.join("teacher.uckp"))?;
        self.prototypes.to_checkpoint().save(&dir.join("prototypes.uckp"))?;
        self.projections.to_checkpoint().save(&dir.join("projections.uckp"))?;
        let text = serde_json::to_string_pretty(&self.alignment)?;
        write_atomic(&dir.join("alignment.json"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let need = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::Dependency(format!("missing {}", p.display())))
            }
        };
        let teacher = TeacherModel::load(&need("teacher.uckp")?)?;
        let prototypes = ClassPrototypes::from_checkpoint(Checkpoint::load(&need("prototypes.uckp")?)?)?;
        let projections = Projections::from_checkpoint(Checkpoint::load(&need("projections.uckp")?)?)?;
        let alignment = serde_json::from_slice(&std::fs::read(need("alignment.json")?)?)?;
        Ok(Self {
            teacher,
            prototypes,
            projections,
            alignment,
        })
    }
}

/// Teacher encodings of every frame of every clip in a dataset. The teacher
/// is frozen and sees frames independently, so these are computed once.
#[derive(Clone, Debug)]
pub struct TeacherCache {
    clips: Vec<Vec<FrameEncoding>>,
}

impl TeacherCache {
    pub fn build(teacher: &TeacherModel, clips: &[VideoClip]) -> Result<Self> {
        Ok(Self {
            clips: clips.par_iter().map(|c| teacher.encode_frames(c)).collect::<Result<_>>()?,
        })
    }

    /// Cache of `self`'s clips followed by `other`'s.
    pub fn concat(&self, other: &TeacherCache) -> TeacherCache {
        Self {
            clips: self.clips.iter().chain(&other.clips).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn frames(&self, clip: usize, frames: &[usize]) -> Result<Vec<&FrameEncoding>> {
        let enc = self
            .clips
            .get(clip)
            .ok_or_else(|| Error::Index(format!("clip {clip} not in teacher cache of {}", self.clips.len())))?;
        frames
            .iter()
            .map(|&t| {
                enc.get(t)
                    .ok_or_else(|| Error::Index(format!("frame {t} beyond {} cached frames", enc.len())))
            })
            .collect()
    }
}

/// One row of the per-step metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: u8,
    pub step: u64,
    pub lr: f32,
    pub loss: f32,
    pub source_loss: Option<f32>,
    pub target_loss: Option<f32>,
    /// Fraction of targets that received a pseudolabel.
    pub coverage: Option<f32>,
}

pub const METRICS_HEADER: &str = "stage,step,lr,loss,source_loss,target_loss,coverage";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let opt = |v: Option<f32>| v.map_or_else(String::new, |v| v.to_string());
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.stage,
            r.step,
            r.lr,
            r.loss,
            opt(r.source_loss),
            opt(r.target_loss),
            opt(r.coverage)
        );
    }
    out
}

/// Per-run summary written next to the metric CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stage: u8,
    pub steps: u64,
    pub first_loss: Option<f32>,
    pub final_loss: Option<f32>,
    pub model_fingerprint: String,
    pub teacher_fingerprint: Option<String>,
    pub mean_coverage: Option<f32>,
}

/// Everything needed to continue a stage bitwise: parameters, optimizer
/// moments, step counter, random stream and logs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: StudentModel,
    pub adam: AdamState,
    pub stage: u8,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<MetricRow>,
    pub audit: Vec<AuditRow>,
}

impl TrainState {
    /// Fresh state for `cfg.stage`. Stage 2 starts from a new head; stage 3
    /// requires a trained one.
    pub fn begin(mut model: StudentModel, cfg: &StageConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.stage {
            2 => model.reset_head(),
            3 if !model.head_trained() => {
                return Err(Error::StageOrder(
                    "self-training needs a model with a trained classification head".into(),
                ))
            }
            _ => {}
        }
        let adam = AdamState::for_store(model.params());
        Ok(Self {
            model,
            adam,
            stage: cfg.stage,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x57a6e, cfg.stage as u64)),
            history: Vec::new(),
            audit: Vec::new(),
        })
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.history)
    }

    pub fn audit_csv(&self) -> String {
        crate::pseudolabel::audit_csv(&self.audit)
    }

    pub fn summary(&self, bundle: Option<&TeacherBundle>) -> RunSummary {
        let cov: Vec<f32> = self.history.iter().filter_map(|r| r.coverage).collect();
        RunSummary {
            stage: self.stage,
            steps: self.step,
            first_loss: self.history.first().map(|r| r.loss),
            final_loss: self.history.last().map(|r| r.loss),
            model_fingerprint: self.model.params().fingerprint(),
            teacher_fingerprint: bundle.map(TeacherBundle::fingerprint),
            mean_coverage: (!cov.is_empty()).then(|| cov.iter().sum::<f32>() / cov.len() as f32),
        }
    }

    pub fn to_checkpoint(&self, cfg: &StageConfig) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(Value::Null);
        let student_header = std::mem::take(&mut ck.header);
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            let shape = vec![m.len()];
            ck.tensors.push((format!("optim.m.{i}"), crate::Tensor::new(shape.clone(), m.clone()).expect("flat")));
            ck.tensors.push((format!("optim.v.{i}"), crate::Tensor::new(shape, v.clone()).expect("flat")));
        }
        ck.header = json!({
            "kind": "train-state",
            "student": student_header,
            "config": cfg,
            "stage": self.stage,
            "step": self.step,
            "optim_step": self.adam.step,
            "rng": {
                "seed": hex::encode(self.rng.get_seed()),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "history": self.history,
            "audit": self.audit,
        });
        ck
    }

    /// Restores a state and the config it was trained with.
    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<(Self, StageConfig)> {
        if ck.header.get("kind").and_then(Value::as_str) != Some("train-state") {
            return Err(Error::format("checkpoint does not hold a training state"));
        }
        let h = std::mem::take(&mut ck.header);
        let field = |k: &str| h.get(k).cloned().ok_or_else(|| Error::format(format!("training state lacks {k}")));
        let cfg: StageConfig = serde_json::from_value(field("config")?)?;
        let optim = ck.take_prefixed("optim.");
        let model = StudentModel::from_checkpoint(Checkpoint {
            header: field("student")?,
            tensors: ck.tensors,
        })?;
        let n = model.params().len();
        let mut m = vec![None; n];
        let mut v = vec![None; n];
        for (name, t) in optim {
            let (kind, idx) = name.split_once('.').ok_or_else(|| Error::format(format!("bad optimizer entry {name}")))?;
            let i: usize = idx.parse().map_err(|_| Error::format(format!("bad optimizer entry {name}")))?;
            let slot = match kind {
                "m" => m.get_mut(i),
                "v" => v.get_mut(i),
                _ => None,
            }
            .ok_or_else(|| Error::format(format!("bad optimizer entry {name}")))?;
            *slot = Some(t.into_data());
        }
        let collect = |xs: Vec<Option<Vec<f32>>>| {
            xs.into_iter()
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::format("optimizer moments incomplete"))
        };
        let adam = AdamState {
            step: field("optim_step")?.as_u64().ok_or_else(|| Error::format("optim_step"))?,
            m: collect(m)?,
            v: collect(v)?,
        };
        for (i, t) in model.params().tensors().iter().enumerate() {
            if adam.m[i].len() != t.numel() || adam.v[i].len() != t.numel() {
                return Err(Error::format("optimizer moments do not match parameters"));
            }
        }
        let rng_h = field("rng")?;
        let seed_hex = rng_h["seed"].as_str().ok_or_else(|| Error::format("rng seed"))?;
        let seed: [u8; 32] = hex::decode(seed_hex)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::format("rng seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(rng_h["stream"].as_u64().ok_or_else(|| Error::format("rng stream"))?);
        rng.set_word_pos(
            rng_h["word_pos"]
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format("rng word position"))?,
        );
        let state = Self {
            model,
            adam,
            stage: field("stage")?.as_u64().ok_or_else(|| Error::format("stage"))? as u8,
            step: field("step")?.as_u64().ok_or_else(|| Error::format("step"))?,
            rng,
            history: serde_json::from_value(field("history")?)?,
            audit: serde_json::from_value(field("audit")?)?,
        };
        Ok((state, cfg))
    }

    pub fn save(&self, cfg: &StageConfig, path: &Path) -> Result<()> {
        self.to_checkpoint(cfg).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, StageConfig)> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    fn check(&self, cfg: &StageConfig, stage: u8) -> Result<()> {
        cfg.validate()?;
        if cfg.stage != stage || self.stage != stage {
            return Err(Error::StageOrder(format!(
                "stage {stage} runner given a stage {} config and a stage {} state",
                cfg.stage, self.stage
            )));
        }
        Ok(())
    }

    fn optimizer_step(&mut self, cfg: &StageConfig, mut tape: Tape, loss: Var, p: &[Var], lr: f32) -> Result<()> {
        let grads = tape.backward(loss)?;
        let depth = self.model.config().depth;
        let store: &mut ParamStore = self.model.params_mut();
        store.zero_grad();
        store.accumulate(&grads, p)?;
        let scales = match cfg.layer_wise_lr_decay {
            Some(d) => layer_scales(store, depth, d),
            None => vec![1.0; self.model.params().len()],
        };
        adamw_step(self.model.params_mut(), &mut self.adam, lr, &scales, cfg.betas(), cfg.weight_decay)?;
        self.model.params_mut().zero_grad();
        Ok(())
    }
}

/// Indices for step `step` when walking `len` items `batch` at a time in a
/// fresh permutation per epoch. The permutation depends only on `seed` and
/// the epoch, so resuming needs no extra state.
pub fn batch_indices(seed: u64, stream: u64, len: usize, batch: usize, step: u64) -> Vec<usize> {
    let spe = steps_per_epoch(len, batch);
    let (epoch, within) = (step / spe, step % spe);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, epoch)));
    let start = within as usize * batch;
    (0..batch).map(|i| perm[(start + i) % len]).collect()
}

fn input_crop(model: &StudentModel, clip: &VideoClip) -> Result<Crop> {
    Crop::center(clip.height(), clip.width(), model.config().frame_size)
}

fn sample_view(model: &StudentModel, clip: &VideoClip, rng: &mut ChaCha8Rng) -> Result<(SamplePlan, VideoClip)> {
    let plan = train_sample(clip.frames(), model.config().frames, input_crop(model, clip)?, rng)?;
    let view = plan.apply(clip)?;
    Ok((plan, view))
}

/// The teacher sees the same crop as the student: its cached patch grid
/// must line up with the student's tokens.
fn check_grids(model: &StudentModel, bundle: &TeacherBundle, clip: &VideoClip) -> Result<()> {
    let (s, t) = (model.config(), bundle.teacher.config());
    if clip.height() != s.frame_size || clip.width() != s.frame_size || s.patch_size != t.patch_size || s.frame_size != t.frame_size {
        return Err(Error::config(
            "student and teacher must share frame and patch size with the stored clips",
        ));
    }
    Ok(())
}

fn sum_scaled(tape: &mut Tape, terms: Vec<Var>, scale: f32) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Batch("empty batch".into()))?;
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, scale))
}

fn frozen_guard(bundle: &TeacherBundle) -> impl FnOnce(&TeacherBundle) -> Result<()> {
    let before = bundle.fingerprint();
    move |after: &TeacherBundle| {
        if after.fingerprint() != before {
            return Err(Error::Spec("frozen teacher parameters changed during a stage".into()));
        }
        Ok(())
    }
}

/// Masked teacher distillation over unlabeled clips, up to `until` steps
/// (default: the configured total).
pub fn run_stage1(
    state: &mut TrainState,
    bundle: &TeacherBundle,
    data: &UnlabeledSet,
    cache: &TeacherCache,
    cfg: &StageConfig,
    until: Option<u64>,
) -> Result<()> {
    state.check(cfg, 1)?;
    if data.is_empty() || cache.len() != data.len() {
        return Err(Error::Data("stage 1 needs a non-empty dataset with matching teacher cache".into()));
    }
    check_grids(&state.model, bundle, data.clip(0))?;
    let guard = frozen_guard(bundle);
    let (warmup, total) = cfg.step_counts(data.len());
    let stop = until.unwrap_or(total).min(total);
    let base = cfg.effective_lr();
    while state.step < stop {
        let idx = batch_indices(cfg.seed, 1, data.len(), cfg.batch_size, state.step);
        let mut tape = Tape::new();
        let p = state.model.bind(&mut tape, true);
        let mut terms = Vec::with_capacity(idx.len());
        for &i in &idx {
            let clip = data.clip(i);
            let (plan, view) = sample_view(&state.model, clip, &mut state.rng)?;
            let frames = cache.frames(i, &plan.frames)?;
            let mask = sample_mask(&attention_map(&frames)?, cfg.masking_ratio, &mut state.rng)?;
            let tok = state.model.tokenize(&mut tape, &p, &view)?;
            let fs = state.model.forward_features(&mut tape, &p, tok, Some(&mask))?;
            let targets = teacher_targets(&frames, &bundle.alignment, &fs.positions)?;
            terms.push(umt_loss(&mut tape, &fs, &targets, &bundle.alignment, &bundle.projections)?);
        }
        let loss = sum_scaled(&mut tape, terms, 1.0 / idx.len() as f32)?;
        let lr = lr_at(state.step, base, warmup, total);
        let value = tape.scalar(loss);
        state.optimizer_step(cfg, tape, loss, &p, lr)?;
        state.history.push(MetricRow {
            stage: 1,
            step: state.step,
            lr,
            loss: value,
            source_loss: None,
            target_loss: None,
            coverage: None,
        });
        state.step += 1;
    }
    guard(bundle)
}

/// Supervised fine-tuning on labeled source clips.
pub fn run_stage2(state: &mut TrainState, source: &LabeledSet, cfg: &StageConfig, until: Option<u64>) -> Result<()> {
    state.check(cfg, 2)?;
    if source.is_empty() {
        return Err(Error::Data("stage 2 needs labeled source clips".into()));
    }
    let (warmup, total) = cfg.step_counts(source.len());
    let stop = until.unwrap_or(total).min(total);
    let base = cfg.effective_lr();
    while state.step < stop {
        let idx = batch_indices(cfg.seed, 2, source.len(), cfg.batch_size, state.step);
        let mut views = Vec::with_capacity(idx.len());
        for &i in &idx {
            views.push(sample_view(&state.model, source.clip(i), &mut state.rng)?.1);
        }
        let labels: Vec<usize> = idx.iter().map(|&i| source.label(i)).collect();
        let mut tape = Tape::new();
        let p = state.model.bind(&mut tape, true);
        let refs: Vec<&VideoClip> = views.iter().collect();
        let loss = crate::objectives::sft_loss(&mut tape, &state.model, &p, &refs, &labels)?;
        let lr = lr_at(state.step, base, warmup, total);
        let value = tape.scalar(loss);
        state.optimizer_step(cfg, tape, loss, &p, lr)?;
        state.history.push(MetricRow {
            stage: 2,
            step: state.step,
            lr,
            loss: value,
            source_loss: Some(value),
            target_loss: None,
            coverage: None,
        });
        state.step += 1;
    }
    if state.step >= total {
        state.model.set_head_trained(true);
    }
    Ok(())
}

/// Pseudolabels for one unmasked target view.
struct TargetEvidence {
    probs: Vec<f32>,
    label: crate::pseudolabel::PseudoLabel,
    attention: AttentionMap,
}

fn target_evidence(
    model: &StudentModel,
    bundle: &TeacherBundle,
    frames: &[&FrameEncoding],
    view: &VideoClip,
    cfg: &StageConfig,
) -> Result<TargetEvidence> {
    let probs = model.predict_proba(view)?;
    let (ya, ca) = argmax(&probs);
    let zs = bundle.teacher.zero_shot_from(frames, &bundle.prototypes)?;
    let attention = attention_map(frames)?;
    let scheme = cfg.pseudolabel_scheme;
    let view_preds: Vec<usize> = if scheme.needs_views() {
        disjoint_masks(&attention, cfg.consistency_views, cfg.masking_ratio)?
            .masks()
            .iter()
            .map(|m| model.classify_masked(view, Some(m)).map(|l| argmax(&l).0))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let ev = Evidence {
        student_pred: ya,
        student_conf: ca,
        teacher: Some((zs.class, zs.confidence)),
        view_preds: &view_preds,
    };
    let label = pseudolabel(&ev, &cfg.scheme_params(), scheme)?;
    Ok(TargetEvidence { probs, label, attention })
}

/// Collaborative self-training: source cross entropy plus confidence
/// weighted cross entropy of masked targets against pseudolabels.
#[allow(clippy::too_many_arguments)]
pub fn run_stage3(
    state: &mut TrainState,
    bundle: &TeacherBundle,
    source: &LabeledSet,
    target: &UnlabeledSet,
    cache: &TeacherCache,
    cfg: &StageConfig,
    until: Option<u64>,
) -> Result<()> {
    state.check(cfg, 3)?;
    if !state.model.head_trained() {
        return Err(Error::StageOrder("self-training needs a model with a trained classification head".into()));
    }
    if source.is_empty() || target.is_empty() || cache.len() != target.len() {
        return Err(Error::Data("stage 3 needs source clips, target clips and a matching teacher cache".into()));
    }
    check_grids(&state.model, bundle, target.clip(0))?;
    let guard = frozen_guard(bundle);
    let (warmup, total) = cfg.step_counts(target.len());
    let stop = until.unwrap_or(total).min(total);
    let base = cfg.effective_lr();
    while state.step < stop {
        let src_idx = batch_indices(cfg.seed, 31, source.len(), cfg.source_batch_size, state.step);
        let tgt_idx = batch_indices(cfg.seed, 32, target.len(), cfg.target_batch_size, state.step);
        let mut src_views = Vec::with_capacity(src_idx.len());
        for &i in &src_idx {
            src_views.push(sample_view(&state.model, source.clip(i), &mut state.rng)?.1);
        }
        let src_labels: Vec<usize> = src_idx.iter().map(|&i| source.label(i)).collect();
        let mut tgt_views = Vec::with_capacity(tgt_idx.len());
        let mut pls = Vec::with_capacity(tgt_idx.len());
        let mut probs = Vec::with_capacity(tgt_idx.len());
        let mut masks: Vec<TokenMask> = Vec::with_capacity(tgt_idx.len());
        for &i in &tgt_idx {
            let (plan, view) = sample_view(&state.model, target.clip(i), &mut state.rng)?;
            let frames = cache.frames(i, &plan.frames)?;
            let ev = target_evidence(&state.model, bundle, &frames, &view, cfg)?;
            if cfg.masked_target_loss {
                masks.push(sample_mask(&ev.attention, cfg.masking_ratio, &mut state.rng)?);
            }
            state.audit.push(AuditRow {
                step: state.step,
                sample: i,
                label: ev.label.clone(),
                q: confidence_weight(&ev.probs),
                truth: None,
            });
            pls.push(ev.label);
            probs.push(ev.probs);
            tgt_views.push(view);
        }
        let coverage = pls.iter().map(selection_mask).sum::<f32>() / pls.len() as f32;
        let mut tape = Tape::new();
        let p = state.model.bind(&mut tape, true);
        let src_refs: Vec<&VideoClip> = src_views.iter().collect();
        let tgt_refs: Vec<&VideoClip> = tgt_views.iter().collect();
        let (loss, s_loss, t_loss) = if cfg.conventional_self_training {
            let threshold = cfg.fixed_confidence_threshold;
            let select = move |row: &[f32]| argmax(row).1 > threshold;
            let l = st_loss(
                &mut tape,
                &state.model,
                &p,
                &src_refs,
                &src_labels,
                &tgt_refs,
                &select,
                cfg.loss_coefficient,
            )?;
            (l, None, None)
        } else {
            let batch = CSTBatch {
                source: src_refs,
                source_labels: src_labels,
                targets: tgt_refs,
                target_masks: cfg.masked_target_loss.then_some(masks),
                pseudolabels: pls,
                target_probs: probs,
                lambda: cfg.loss_coefficient,
                include_source: cfg.source_loss,
            };
            let terms = cst_loss(&mut tape, &state.model, &p, &batch)?;
            (terms.total, terms.source, terms.target)
        };
        let lr = lr_at(state.step, base, warmup, total);
        let value = tape.scalar(loss);
        let s_val = s_loss.map(|v| tape.scalar(v));
        let t_val = t_loss.map(|v| tape.scalar(v));
        // A batch without source term and without selected targets carries
        // no gradient, so the optimizer (and its moments) skip it.
        if cfg.conventional_self_training || s_loss.is_some() || t_loss.is_some() {
            state.optimizer_step(cfg, tape, loss, &p, lr)?;
        }
        state.history.push(MetricRow {
            stage: 3,
            step: state.step,
            lr,
            loss: value,
            source_loss: s_val,
            target_loss: t_val,
            coverage: Some(coverage),
        });
        state.step += 1;
    }
    guard(bundle)
}
