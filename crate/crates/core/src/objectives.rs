//! Stage losses: masked feature distillation, supervised fine-tuning,
//! conventional self-training and collaborative self-training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::TokenMask;
use crate::pseudolabel::{confidence_weight, selection_mask, PseudoLabel};
use crate::teacher::{argmax, FrameEncoding, Projections};
use crate::tensor::{softmax_rows, Tape, Tensor, Var};
use crate::video::VideoClip;
use crate::vit::{FeatureStack, StudentModel};

/// Which student layers are distilled and from which teacher layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSpec {
    /// Student layer indices into a [`FeatureStack`] (1 = first block).
    pub student_layers: Vec<usize>,
    /// Matching indices into [`FrameEncoding::layers`].
    pub teacher_layers: Vec<usize>,
    pub mask_ratio: f32,
}

impl AlignmentSpec {
    /// Aligns the last `count` blocks of both networks.
    pub fn last_layers(count: usize, student_depth: usize, teacher_depth: usize, mask_ratio: f32) -> Result<Self> {
        if count == 0 || count > student_depth || count > teacher_depth {
            return Err(Error::Spec(format!(
                "cannot align {count} layers between depths {student_depth} and {teacher_depth}"
            )));
        }
        Ok(Self {
            student_layers: (student_depth + 1 - count..=student_depth).collect(),
            teacher_layers: (teacher_depth - count..teacher_depth).collect(),
            mask_ratio,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.student_layers.is_empty() || self.student_layers.len() != self.teacher_layers.len() {
            return Err(Error::Spec("aligned layer lists must be non-empty and of equal length".into()));
        }
        Ok(())
    }
}

/// Teacher targets for the student's retained tokens: one
/// `[positions × d_t]` matrix per aligned layer, in [`AlignmentSpec`] order.
///
/// `frames[t]` encodes the frame the student saw at time step `t`; student
/// token `t·patches + p` maps to patch `p` of that frame.
pub fn teacher_targets(
    frames: &[&FrameEncoding],
    spec: &AlignmentSpec,
    positions: &[usize],
) -> Result<FeatureStack<Tensor>> {
    let first = frames.first().ok_or_else(|| Error::Spec("no teacher frames".into()))?;
    let mut layers = Vec::with_capacity(spec.teacher_layers.len());
    for &tl in &spec.teacher_layers {
        let sample = first
            .layers
            .get(tl)
            .ok_or_else(|| Error::Spec(format!("teacher layer {tl} missing")))?;
        let (patches, d) = sample.dims2()?;
        let mut data = Vec::with_capacity(positions.len() * d);
        for &pos in positions {
            let (t, p) = (pos / patches, pos % patches);
            let f = frames
                .get(t)
                .ok_or_else(|| Error::Index(format!("token {pos} beyond {} teacher frames", frames.len())))?;
            data.extend_from_slice(f.layers[tl].row(p));
        }
        layers.push(Tensor::new(vec![positions.len(), d], data)?);
    }
    Ok(FeatureStack {
        layers,
        positions: positions.to_vec(),
    })
}

/// `1/|A| Σ_l MSE(d^l(norm(z_a^l)), norm(z_*^l))` over retained tokens.
pub fn umt_loss(
    tape: &mut Tape,
    student: &FeatureStack<Var>,
    teacher: &FeatureStack<Tensor>,
    spec: &AlignmentSpec,
    proj: &Projections,
) -> Result<Var> {
    spec.validate()?;
    if teacher.layers.len() != spec.student_layers.len() || proj.maps.len() != spec.student_layers.len() {
        return Err(Error::Spec(format!(
            "{} aligned layers but {} teacher layers and {} projections",
            spec.student_layers.len(),
            teacher.layers.len(),
            proj.maps.len()
        )));
    }
    if student.positions != teacher.positions {
        return Err(Error::Batch("student and teacher token positions differ".into()));
    }
    let mut total: Option<Var> = None;
    for (i, &l) in spec.student_layers.iter().enumerate() {
        let z = *student.layer(l)?;
        let z = tape.l2_normalize(z);
        let m = &proj.maps[i];
        let w = tape.constant(m.shape().to_vec(), m.data().to_vec())?;
        let za = tape.matmul(z, w)?;
        let t = &teacher.layers[i];
        let zt = tape.constant(t.shape().to_vec(), t.data().to_vec())?;
        let zt = tape.l2_normalize(zt);
        let e = tape.mse(za, zt)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, e)?,
            None => e,
        });
    }
    let total = total.expect("alignment spec is non-empty");
    Ok(tape.scale(total, 1.0 / spec.student_layers.len() as f32))
}

fn check_labels(clips: usize, labels: usize) -> Result<()> {
    if clips != labels {
        return Err(Error::Batch(format!("{clips} clips but {labels} labels")));
    }
    if clips == 0 {
        return Err(Error::Batch("empty batch".into()));
    }
    Ok(())
}

/// Mean cross entropy over unmasked labeled clips.
pub fn sft_loss(tape: &mut Tape, model: &StudentModel, p: &[Var], clips: &[&VideoClip], labels: &[usize]) -> Result<Var> {
    check_labels(clips.len(), labels.len())?;
    let logits = model.batch_logits(tape, p, clips, None)?;
    tape.cross_entropy(logits, labels, &vec![1.0; labels.len()])
}

/// Conventional self-training: source CE plus `λ` times the mean CE of
/// targets against the student's own argmax, restricted to targets the
/// selector accepts (given the student's softmax).
#[allow(clippy::too_many_arguments)]
pub fn st_loss(
    tape: &mut Tape,
    model: &StudentModel,
    p: &[Var],
    source: &[&VideoClip],
    source_labels: &[usize],
    targets: &[&VideoClip],
    selector: &dyn Fn(&[f32]) -> bool,
    lambda: f32,
) -> Result<Var> {
    let src = sft_loss(tape, model, p, source, source_labels)?;
    if targets.is_empty() || lambda == 0.0 {
        return Ok(src);
    }
    let logits = model.batch_logits(tape, p, targets, None)?;
    let c = model.config().num_classes;
    let probs = softmax_rows(tape.value(logits), c);
    let mut labels = Vec::with_capacity(targets.len());
    let mut weights = Vec::with_capacity(targets.len());
    for row in probs.chunks_exact(c) {
        labels.push(argmax(row).0);
        weights.push(if selector(row) { 1.0 } else { 0.0 });
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(src);
    }
    let tgt = tape.cross_entropy(logits, &labels, &weights)?;
    let tgt = tape.scale(tgt, lambda);
    tape.add(src, tgt)
}

/// One collaborative self-training batch. Pseudolabels were computed on
/// the unmasked `targets`; the loss sees them through `target_masks`
/// (`None` trains on unmasked targets).
#[derive(Clone, Debug)]
pub struct CSTBatch<'a> {
    pub source: Vec<&'a VideoClip>,
    pub source_labels: Vec<usize>,
    pub targets: Vec<&'a VideoClip>,
    pub target_masks: Option<Vec<TokenMask>>,
    pub pseudolabels: Vec<PseudoLabel>,
    /// Student softmax on each unmasked target, the source of `q`.
    pub target_probs: Vec<Vec<f32>>,
    pub lambda: f32,
    pub include_source: bool,
}

impl CSTBatch<'_> {
    pub fn validate(&self) -> Result<()> {
        let n = self.targets.len();
        if self.pseudolabels.len() != n || self.target_probs.len() != n {
            return Err(Error::Batch(format!(
                "{n} targets, {} pseudolabels, {} probability rows",
                self.pseudolabels.len(),
                self.target_probs.len()
            )));
        }
        if let Some(m) = &self.target_masks {
            if m.len() != n {
                return Err(Error::Batch(format!("{} masks for {n} targets", m.len())));
            }
        }
        if self.include_source {
            check_labels(self.source.len(), self.source_labels.len())?;
        }
        Ok(())
    }

    /// `s·q` per target.
    pub fn target_weights(&self) -> Vec<f32> {
        self.pseudolabels
            .iter()
            .zip(&self.target_probs)
            .map(|(pl, probs)| selection_mask(pl) * confidence_weight(probs))
            .collect()
    }
}

/// Separate terms of the collaborative loss.
#[derive(Clone, Copy, Debug)]
pub struct CstTerms {
    pub total: Var,
    pub source: Option<Var>,
    pub target: Option<Var>,
}

/// `CE_source + λ · mean_t[s·q·CE(f(m(x_t)), ỹ_t)]`. The weight `q` is a
/// constant. Targets with `s = 0` never enter the graph.
pub fn cst_loss(tape: &mut Tape, model: &StudentModel, p: &[Var], batch: &CSTBatch<'_>) -> Result<CstTerms> {
    batch.validate()?;
    let source = if batch.include_source {
        Some(sft_loss(tape, model, p, &batch.source, &batch.source_labels)?)
    } else {
        None
    };
    let weights = batch.target_weights();
    let kept: Vec<usize> = (0..batch.targets.len()).filter(|&i| weights[i] > 0.0).collect();
    let target = if kept.is_empty() || batch.lambda == 0.0 {
        None
    } else {
        let clips: Vec<&VideoClip> = kept.iter().map(|&i| batch.targets[i]).collect();
        let masks: Option<Vec<TokenMask>> = batch
            .target_masks
            .as_ref()
            .map(|m| kept.iter().map(|&i| m[i].clone()).collect());
        let logits = model.batch_logits(tape, p, &clips, masks.as_deref())?;
        let labels: Vec<usize> = kept
            .iter()
            .map(|&i| batch.pseudolabels[i].label.expect("selected targets carry a label"))
            .collect();
        let w: Vec<f32> = kept.iter().map(|&i| weights[i]).collect();
        let ce = tape.cross_entropy(logits, &labels, &w)?;
        // Rescale the mean over kept rows to a mean over the whole target batch.
        let scale = batch.lambda * kept.len() as f32 / batch.targets.len() as f32;
        Some(tape.scale(ce, scale))
    };
    let total = match (source, target) {
        (Some(s), Some(t)) => tape.add(s, t)?,
        (Some(s), None) => s,
        (None, Some(t)) => t,
        (None, None) => {
            let z = tape.constant(vec![], vec![0.0])?;
            tape.scale(z, 1.0)
        }
    };
    Ok(CstTerms { total, source, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudolabel::Scheme;
    use crate::video::Domain;
    use crate::vit::ViTConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> StudentModel {
        let cfg = ViTConfig {
            frame_size: 4,
            patch_size: 2,
            frames: 2,
            channels: 1,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            positional_encoding: true,
            standardize_input: false,
        };
        let mut m = StudentModel::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for t in m.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        m
    }

    fn clips(n: usize, seed: u64) -> Vec<VideoClip> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                VideoClip::new([1, 2, 4, 4], (0..32).map(|_| rng.gen_range(0.0..1.0)).collect(), None, Domain::Target)
                    .unwrap()
            })
            .collect()
    }

    fn ce_oracle(logits: &[f32], label: usize) -> f64 {
        let mx = logits.iter().cloned().fold(f32::MIN, f32::max) as f64;
        let z: f64 = logits.iter().map(|&v| (v as f64 - mx).exp()).sum();
        mx + z.ln() - logits[label] as f64
    }

    fn pl(label: Option<usize>) -> PseudoLabel {
        PseudoLabel {
            label,
            student_pred: label.unwrap_or(0),
            student_conf: 0.5,
            teacher_pred: label,
            teacher_conf: 0.5,
            scheme: Scheme::MatchOrConf,
        }
    }

    fn stack_from(tape: &mut Tape, rows: usize, values: &[f32]) -> FeatureStack<Var> {
        let x = tape.leaf(&Tensor::new(vec![rows, values.len() / rows], values.to_vec()).unwrap().with_grad());
        FeatureStack {
            layers: vec![x, x],
            positions: (0..rows).collect(),
        }
    }

    fn spec1() -> AlignmentSpec {
        AlignmentSpec {
            student_layers: vec![1],
            teacher_layers: vec![0],
            mask_ratio: 0.8,
        }
    }

    #[test]
    fn desk_alignment_is_last_two_blocks() {
        let a = AlignmentSpec::last_layers(2, 4, 2, 0.8).unwrap();
        assert_eq!(a.student_layers, vec![3, 4]);
        assert_eq!(a.teacher_layers, vec![0, 1]);
        assert!(AlignmentSpec::last_layers(3, 4, 2, 0.8).is_err());
    }

    #[test]
    fn umt_identity_is_zero() {
        let vals = [0.3, -1.2, 2.0, 0.5, 0.1, 0.9];
        let mut tape = Tape::new();
        let s = stack_from(&mut tape, 2, &vals);
        let t = FeatureStack {
            layers: vec![Tensor::new(vec![2, 3], vals.to_vec()).unwrap()],
            positions: vec![0, 1],
        };
        let loss = umt_loss(&mut tape, &s, &t, &spec1(), &Projections::identity(1, 3)).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn umt_ignores_teacher_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tv: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let proj = Projections::orthogonal(1, 4, 4, 2).unwrap();
        let loss_with = |c: f32| {
            let mut tape = Tape::new();
            let s = stack_from(&mut tape, 3, &vals);
            let t = FeatureStack {
                layers: vec![Tensor::new(vec![3, 4], tv.iter().map(|v| v * c).collect()).unwrap()],
                positions: vec![0, 1, 2],
            };
            let l = umt_loss(&mut tape, &s, &t, &spec1(), &proj).unwrap();
            tape.scalar(l)
        };
        let base = loss_with(1.0);
        assert!(base > 0.0);
        for c in [0.1, 3.0, 100.0] {
            assert!((loss_with(c) - base).abs() < 1e-7);
        }
    }

    #[test]
    fn umt_hand_fixture() {
        let mut tape = Tape::new();
        let s = stack_from(&mut tape, 2, &[3.0, 4.0, 1.0, 0.0]);
        let t = FeatureStack {
            layers: vec![Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 2.0]).unwrap()],
            positions: vec![0, 1],
        };
        let swap = Projections {
            maps: vec![Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()],
        };
        let l = umt_loss(&mut tape, &s, &t, &spec1(), &swap).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = ((0.8 - r).powi(2) + (0.6 - r).powi(2)) / 4.0;
        assert!((tape.scalar(l) as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn umt_missing_layer_is_spec_error() {
        let mut tape = Tape::new();
        let s = stack_from(&mut tape, 1, &[1.0, 0.0]);
        let t = FeatureStack { layers: vec![Tensor::zeros(&[1, 2])], positions: vec![0] };
        let spec = AlignmentSpec { student_layers: vec![5], teacher_layers: vec![0], mask_ratio: 0.8 };
        assert!(matches!(
            umt_loss(&mut tape, &s, &t, &spec, &Projections::identity(1, 2)),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn teacher_targets_follow_token_layout() {
        let enc = |base: f32| FrameEncoding {
            layers: vec![Tensor::from_fn(&[4, 2], |i| base + i as f32)],
            cls: vec![0.0; 2],
            attention: vec![0.25; 4],
        };
        let (a, b) = (enc(0.0), enc(100.0));
        let t = teacher_targets(&[&a, &b], &spec1(), &[1, 6]).unwrap();
        assert_eq!(t.layers[0].data(), &[2.0, 3.0, 104.0, 105.0]);
    }

    #[test]
    fn sft_zero_head_is_log_classes() {
        let mut m = tiny_model(0);
        m.reset_head();
        let cs = clips(3, 1);
        let refs: Vec<&VideoClip> = cs.iter().collect();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let l = sft_loss(&mut tape, &m, &p, &refs, &[0, 1, 2]).unwrap();
        assert!((tape.scalar(l) - 3f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn sft_matches_scalar_loop() {
        let m = tiny_model(2);
        let cs = clips(4, 3);
        let refs: Vec<&VideoClip> = cs.iter().collect();
        let labels = [2, 0, 1, 1];
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let l = sft_loss(&mut tape, &m, &p, &refs, &labels).unwrap();
        let oracle: f64 = cs.iter().zip(labels).map(|(c, y)| ce_oracle(&m.classify(c).unwrap(), y)).sum::<f64>() / 4.0;
        assert!((tape.scalar(l) as f64 - oracle).abs() < 1e-6);
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let one = sft_loss(&mut tape, &m, &p, &refs[..1], &[2]).unwrap();
        assert!((tape.scalar(one) as f64 - ce_oracle(&m.classify(&cs[0]).unwrap(), 2)).abs() < 1e-6);
        assert!(sft_loss(&mut tape, &m, &p, &refs[..1], &[3]).is_err());
    }

    #[test]
    fn st_degenerate_cases_and_hand_value() {
        let m = tiny_model(4);
        let src = clips(2, 5);
        let tgt = clips(2, 6);
        let (s, t): (Vec<&VideoClip>, Vec<&VideoClip>) = (src.iter().collect(), tgt.iter().collect());
        let value = |sel: &dyn Fn(&[f32]) -> bool, lambda: f32| {
            let mut tape = Tape::new();
            let p = m.bind(&mut tape, false);
            let l = st_loss(&mut tape, &m, &p, &s, &[0, 1], &t, sel, lambda).unwrap();
            tape.scalar(l) as f64
        };
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let sft = sft_loss(&mut tape, &m, &p, &s, &[0, 1]).unwrap();
        let sft = tape.scalar(sft) as f64;
        assert_eq!(value(&|_| false, 1.0), sft);
        assert_eq!(value(&|_| true, 0.0), sft);
        let tl: Vec<Vec<f32>> = tgt.iter().map(|c| m.classify(c).unwrap()).collect();
        let hand = sft + 0.5 * tl.iter().map(|l| ce_oracle(l, argmax(l).0)).sum::<f64>() / 2.0;
        assert!((value(&|_| true, 0.5) - hand).abs() < 1e-6);
    }

    fn batch<'a>(src: &'a [VideoClip], tgt: &'a [VideoClip], labels: Vec<Option<usize>>, q: &[f32]) -> CSTBatch<'a> {
        CSTBatch {
            source: src.iter().collect(),
            source_labels: (0..src.len()).map(|i| i % 3).collect(),
            targets: tgt.iter().collect(),
            target_masks: None,
            pseudolabels: labels.into_iter().map(pl).collect(),
            target_probs: q.iter().map(|&q| vec![q, (1.0 - q) / 2.0, (1.0 - q) / 2.0]).collect(),
            lambda: 1.0,
            include_source: true,
        }
    }

    fn scalar_cst(m: &StudentModel, b: &CSTBatch<'_>) -> (f32, Option<f32>, Option<f32>) {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let t = cst_loss(&mut tape, m, &p, b).unwrap();
        (tape.scalar(t.total), t.source.map(|v| tape.scalar(v)), t.target.map(|v| tape.scalar(v)))
    }

    #[test]
    fn cst_full_abstention_is_source_only() {
        let m = tiny_model(7);
        let (src, tgt) = (clips(2, 8), clips(2, 9));
        let b = batch(&src, &tgt, vec![None, None], &[0.9, 0.8]);
        let (total, source, target) = scalar_cst(&m, &b);
        assert_eq!(Some(total), source);
        assert!(target.is_none());
    }

    #[test]
    fn cst_single_target_arithmetic() {
        let m = tiny_model(7);
        let (src, tgt) = (clips(1, 8), clips(1, 9));
        let mut b = batch(&src, &tgt, vec![Some(1)], &[0.5]);
        b.include_source = false;
        let (total, _, _) = scalar_cst(&m, &b);
        let ce = ce_oracle(&m.classify(&tgt[0]).unwrap(), 1);
        assert!((total as f64 - 0.5 * ce).abs() < 1e-6);
    }

    #[test]
    fn cst_two_plus_two_fixture() {
        let m = tiny_model(10);
        let (src, tgt) = (clips(2, 11), clips(2, 12));
        let b = batch(&src, &tgt, vec![Some(2), None], &[0.8, 0.6]);
        let (total, _, _) = scalar_cst(&m, &b);
        let s: f64 = (0..2).map(|i| ce_oracle(&m.classify(&src[i]).unwrap(), i % 3)).sum::<f64>() / 2.0;
        let t = 0.8 * ce_oracle(&m.classify(&tgt[0]).unwrap(), 2) / 2.0;
        assert!((total as f64 - (s + t)).abs() < 1e-6);
    }

    #[test]
    fn removing_source_changes_only_source_term() {
        let m = tiny_model(13);
        let (src, tgt) = (clips(2, 14), clips(3, 15));
        let b = batch(&src, &tgt, vec![Some(0), Some(2), None], &[0.7, 0.4, 0.9]);
        let (full, source, _) = scalar_cst(&m, &b);
        let mut nb = b.clone();
        nb.include_source = false;
        let (no_src, _, _) = scalar_cst(&m, &nb);
        assert_eq!(no_src + source.unwrap(), full);
    }

    #[test]
    fn abstained_targets_have_no_gradient_effect() {
        let m = tiny_model(16);
        let (src, tgt) = (clips(2, 17), clips(3, 18));
        let other = clips(1, 99);
        let grads = |b: &CSTBatch<'_>| {
            let mut mm = m.clone();
            let mut tape = Tape::new();
            let p = mm.bind(&mut tape, true);
            let t = cst_loss(&mut tape, &mm, &p, b).unwrap();
            let g = tape.backward(t.total).unwrap();
            mm.params_mut().accumulate(&g, &p).unwrap();
            mm.params().tensors().iter().flat_map(|t| t.grad().unwrap().to_vec()).collect::<Vec<f32>>()
        };
        let b = batch(&src, &tgt, vec![Some(0), None, Some(1)], &[0.7, 0.9, 0.6]);
        let mut swapped = b.clone();
        swapped.targets[1] = &other[0];
        assert_eq!(grads(&b), grads(&swapped));
    }

    #[test]
    fn misaligned_batch_is_rejected() {
        let m = tiny_model(1);
        let (src, tgt) = (clips(1, 2), clips(2, 3));
        let mut b = batch(&src, &tgt, vec![Some(0), None], &[0.7, 0.9]);
        b.target_masks = Some(vec![TokenMask::all_visible(8)]);
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        assert!(matches!(cst_loss(&mut tape, &m, &p, &b), Err(Error::Batch(_))));
    }
}
