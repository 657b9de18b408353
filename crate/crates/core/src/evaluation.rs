//! Multi-view top-1 evaluation, class-wise reports and pseudolabel audits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::pseudolabel::{selection_mask, AuditRow};
use crate::sampling::{test_views, SamplePlan};
use crate::teacher::{argmax, ClassPrototypes, TeacherModel};
use crate::video::VideoClip;
use crate::vit::StudentModel;

/// Temporal clips times spatial crops, each clip `frames` long.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewProtocol {
    pub clips: usize,
    pub crops: usize,
    pub frames: usize,
    pub input_size: usize,
}

impl ViewProtocol {
    /// Four temporal clips by three spatial crops.
    pub fn standard(frames: usize, input_size: usize) -> Self {
        Self {
            clips: 4,
            crops: 3,
            frames,
            input_size,
        }
    }

    pub fn single(frames: usize, input_size: usize) -> Self {
        Self {
            clips: 1,
            crops: 1,
            frames,
            input_size,
        }
    }

    pub fn plans(&self, clip: &VideoClip) -> Result<Vec<SamplePlan>> {
        test_views(
            clip.frames(),
            self.frames,
            self.clips,
            self.crops,
            (clip.height(), clip.width()),
            self.input_size,
        )
    }
}

/// Maps one view of a clip to a probability vector.
pub trait Predictor {
    fn predict(&self, view: &VideoClip) -> Result<Vec<f32>>;
}

impl<F> Predictor for F
where
    F: Fn(&VideoClip) -> Result<Vec<f32>>,
{
    fn predict(&self, view: &VideoClip) -> Result<Vec<f32>> {
        self(view)
    }
}

impl Predictor for StudentModel {
    fn predict(&self, view: &VideoClip) -> Result<Vec<f32>> {
        self.predict_proba(view)
    }
}

/// Zero-shot teacher over the frames of a view.
pub struct ZeroShotPredictor<'a> {
    pub teacher: &'a TeacherModel,
    pub prototypes: &'a ClassPrototypes,
}

impl Predictor for ZeroShotPredictor<'_> {
    fn predict(&self, view: &VideoClip) -> Result<Vec<f32>> {
        Ok(self.teacher.zero_shot_classify(view, self.prototypes)?.probs)
    }
}

/// Mean of the per-view probability vectors. Views that repeat an earlier
/// plan (short clips, crops equal to the frame) are predicted once and
/// counted with their multiplicity.
pub fn view_averaged(predictor: &dyn Predictor, clip: &VideoClip, plans: &[SamplePlan]) -> Result<Vec<f32>> {
    if plans.is_empty() {
        return Err(Error::config("no test views"));
    }
    let mut unique: BTreeMap<(Vec<usize>, [usize; 4]), usize> = BTreeMap::new();
    for p in plans {
        let c = p.crop;
        *unique.entry((p.frames.clone(), [c.top, c.left, c.height, c.width])).or_default() += 1;
    }
    let mut acc: Vec<f64> = Vec::new();
    for (i, p) in plans.iter().enumerate() {
        let c = p.crop;
        let key = (p.frames.clone(), [c.top, c.left, c.height, c.width]);
        let Some(mult) = unique.remove(&key) else {
            continue;
        };
        let probs = predictor.predict(&p.apply(clip)?)?;
        if acc.is_empty() {
            acc = vec![0.0; probs.len()];
        } else if probs.len() != acc.len() {
            return Err(Error::dim(format!("view {i} gave {} classes, expected {}", probs.len(), acc.len())));
        }
        acc.iter_mut().zip(&probs).for_each(|(a, &v)| *a += mult as f64 * v as f64);
    }
    let n = plans.len() as f64;
    Ok(acc.into_iter().map(|v| (v / n) as f32).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub name: String,
    pub count: usize,
    pub correct: usize,
    /// Percent; `None` when the class has no samples.
    pub accuracy: Option<f64>,
}

/// Pseudolabel quality over an audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudolabelStats {
    pub total: usize,
    pub selected: usize,
    pub correct: usize,
    /// Fraction of samples with a pseudolabel.
    pub coverage: Option<f64>,
    /// Fraction of pseudolabels equal to the ground truth; undefined when
    /// nothing was selected.
    pub precision: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.4}"))
}

impl PseudolabelStats {
    pub fn precision_text(&self) -> String {
        fmt_opt(self.precision)
    }

    pub fn coverage_text(&self) -> String {
        fmt_opt(self.coverage)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent correct over all clips.
    pub top1: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub pseudolabels: Option<PseudolabelStats>,
    pub predictions: Vec<usize>,
    pub metadata: Value,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "class,name,count,correct,accuracy";

    /// One row per class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for c in &self.per_class {
            let acc = c.accuracy.map_or_else(|| "N/A".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(out, "{},{},{},{},{}", c.class, c.name, c.count, c.correct, acc);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Top-1 accuracy of `predictor` on `data` under `protocol`. Argmax ties go
/// to the lowest class index.
pub fn evaluate(predictor: &dyn Predictor, data: &LabeledSet, names: &[String], protocol: &ViewProtocol) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut count = vec![0usize; names.len()];
    let mut correct = vec![0usize; names.len()];
    let mut predictions = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let clip = data.clip(i);
        let probs = view_averaged(predictor, clip, &protocol.plans(clip)?)?;
        if probs.len() != names.len() {
            return Err(Error::dim(format!("{} scores for {} classes", probs.len(), names.len())));
        }
        let pred = argmax(&probs).0;
        let y = data.label(i);
        if y >= names.len() {
            return Err(Error::Index(format!("label {y} outside {} classes", names.len())));
        }
        count[y] += 1;
        correct[y] += usize::from(pred == y);
        predictions.push(pred);
    }
    let total_correct: usize = correct.iter().sum();
    let per_class = names
        .iter()
        .enumerate()
        .map(|(c, name)| ClassAccuracy {
            class: c,
            name: name.clone(),
            count: count[c],
            correct: correct[c],
            accuracy: (count[c] > 0).then(|| 100.0 * correct[c] as f64 / count[c] as f64),
        })
        .collect();
    Ok(EvalReport {
        top1: 100.0 * total_correct as f64 / data.len() as f64,
        per_class,
        pseudolabels: None,
        predictions,
        metadata: serde_json::json!({ "protocol": protocol, "clips": data.len() }),
    })
}

/// Coverage and precision of an audit log, with `truth[sample]` the label of
/// each target sample.
pub fn pseudolabel_audit(rows: &[AuditRow], truth: &[usize]) -> Result<PseudolabelStats> {
    let mut selected = 0;
    let mut correct = 0;
    for r in rows {
        if selection_mask(&r.label) == 0.0 {
            continue;
        }
        selected += 1;
        let y = *truth
            .get(r.sample)
            .ok_or_else(|| Error::Index(format!("audit sample {} has no ground truth", r.sample)))?;
        correct += usize::from(r.label.label == Some(y));
    }
    Ok(PseudolabelStats {
        total: rows.len(),
        selected,
        correct,
        coverage: (!rows.is_empty()).then(|| selected as f64 / rows.len() as f64),
        precision: (selected > 0).then(|| correct as f64 / selected as f64),
    })
}

/// Student and teacher class-wise reports on the same data; the student
/// report carries the pseudolabel audit when one is given.
pub fn classwise_report(
    student: &StudentModel,
    teacher: &TeacherModel,
    prototypes: &ClassPrototypes,
    data: &LabeledSet,
    names: &[String],
    protocol: &ViewProtocol,
    audit: Option<&[AuditRow]>,
) -> Result<(EvalReport, EvalReport)> {
    let mut s = evaluate(student, data, names, protocol)?;
    let zs = ZeroShotPredictor { teacher, prototypes };
    let t = evaluate(&zs, data, names, protocol)?;
    if let Some(rows) = audit {
        let truth: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
        s.pseudolabels = Some(pseudolabel_audit(rows, &truth)?);
    }
    Ok((s, t))
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudolabel::{PseudoLabel, Scheme};
    use crate::video::Domain;
    use proptest::prelude::*;

    fn clip(label: usize, len: usize, value: f32) -> VideoClip {
        VideoClip::new([1, len, 4, 4], vec![value; len * 16], Some(label), Domain::Target).unwrap()
    }

    fn balanced(len: usize) -> LabeledSet {
        LabeledSet::new((0..16).map(|i| clip(i % 8, len, i as f32)).collect()).unwrap()
    }

    fn names() -> Vec<String> {
        (0..8).map(|c| format!("c{c}")).collect()
    }

    fn one_hot(c: usize) -> Vec<f32> {
        let mut v = vec![0.0; 8];
        v[c] = 1.0;
        v
    }

    #[test]
    fn perfect_oracle_scores_100() {
        let data = balanced(16);
        let oracle = |v: &VideoClip| -> Result<Vec<f32>> { Ok(one_hot((v.pixel(0, 0, 0, 0) as usize) % 8)) };
        let r = evaluate(&oracle, &data, &names(), &ViewProtocol::standard(4, 4)).unwrap();
        assert_eq!(r.top1, 100.0);
        assert!(r.per_class.iter().all(|c| c.accuracy == Some(100.0)));
    }

    #[test]
    fn constant_predictor_hits_class_zero_frequency() {
        let data = balanced(16);
        let flat = |_: &VideoClip| -> Result<Vec<f32>> { Ok(vec![0.125; 8]) };
        let r = evaluate(&flat, &data, &names(), &ViewProtocol::standard(4, 4)).unwrap();
        assert_eq!(r.top1, 12.5);
        assert!(r.predictions.iter().all(|&p| p == 0));
    }

    #[test]
    fn single_view_equals_direct_prediction() {
        let data = balanced(4);
        let pred = |v: &VideoClip| -> Result<Vec<f32>> {
            let x = v.pixel(0, 0, 0, 0);
            Ok((0..8).map(|c| if (c as f32 - x % 8.0).abs() < 1.5 { 1.0 / 3.0 } else { 0.0 }).collect())
        };
        let r = evaluate(&pred, &data, &names(), &ViewProtocol::single(4, 4)).unwrap();
        let direct: Vec<usize> = data.clips().iter().map(|c| argmax(&pred(c).unwrap()).0).collect();
        assert_eq!(r.predictions, direct);
    }

    #[test]
    fn duplicate_views_keep_their_weight() {
        // Crops equal to the frame repeat each temporal clip three times.
        let c = clip(0, 16, 0.0);
        let plans = ViewProtocol::standard(4, 4).plans(&c).unwrap();
        let by_clip = |v: &VideoClip| -> Result<Vec<f32>> {
            // Frames differ only through their index; use the pixel sum as a key.
            let mut p = vec![0.0; 8];
            p[(v.data().iter().sum::<f32>() as usize) % 8] = 1.0;
            Ok(p)
        };
        let avg = view_averaged(&by_clip, &c, &plans).unwrap();
        let brute: Vec<f32> = {
            let mut acc = vec![0.0f64; 8];
            for p in &plans {
                for (a, v) in acc.iter_mut().zip(by_clip(&p.apply(&c).unwrap()).unwrap()) {
                    *a += v as f64 / plans.len() as f64;
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        };
        assert_eq!(avg, brute);
    }

    #[test]
    fn audit_counts() {
        let pl = |label: Option<usize>| PseudoLabel {
            label,
            student_pred: 0,
            student_conf: 0.5,
            teacher_pred: Some(0),
            teacher_conf: 0.5,
            scheme: Scheme::MatchOrConf,
        };
        let row = |sample, label| AuditRow {
            step: 0,
            sample,
            label: pl(label),
            q: 0.5,
            truth: None,
        };
        let truth = vec![0, 1, 2];
        let s = pseudolabel_audit(&[row(0, Some(0)), row(1, Some(0)), row(2, None)], &truth).unwrap();
        assert_eq!((s.selected, s.correct), (2, 1));
        assert_eq!(s.coverage, Some(2.0 / 3.0));
        assert_eq!(s.precision, Some(0.5));
        let none = pseudolabel_audit(&[row(0, None), row(1, None)], &truth).unwrap();
        assert_eq!(none.coverage, Some(0.0));
        assert_eq!(none.precision_text(), "N/A");
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn averaged_views_are_distributions(logits in proptest::collection::vec(-5.0f32..5.0, 8), mult in 1usize..4) {
            let len = 16 * mult;
            let c = clip(0, len, 0.5);
            let plans = ViewProtocol::standard(4, 4).plans(&c).unwrap();
            let pred = |v: &VideoClip| -> Result<Vec<f32>> {
                let shift = v.data().iter().sum::<f32>();
                let row: Vec<f32> = logits.iter().enumerate().map(|(i, &l)| l + (i as f32 * shift).sin()).collect();
                Ok(crate::tensor::softmax_rows(&row, 8))
            };
            let avg = view_averaged(&pred, &c, &plans).unwrap();
            prop_assert!((avg.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(avg.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn accuracy_ignores_order(perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut clips: Vec<VideoClip> = (0..16).map(|i| clip(i % 8, 16, i as f32)).collect();
            let pred = |v: &VideoClip| -> Result<Vec<f32>> { Ok(one_hot((v.pixel(0, 0, 0, 0) as usize * 3) % 8)) };
            let a = evaluate(&pred, &LabeledSet::new(clips.clone()).unwrap(), &names(), &ViewProtocol::single(4, 4)).unwrap();
            clips.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let b = evaluate(&pred, &LabeledSet::new(clips).unwrap(), &names(), &ViewProtocol::single(4, 4)).unwrap();
            prop_assert_eq!(a.top1, b.top1);
            prop_assert!((0.0..=100.0).contains(&a.top1));
            let weighted: f64 = a.per_class.iter().map(|c| c.accuracy.unwrap_or(0.0) * c.count as f64).sum::<f64>() / 16.0;
            prop_assert!((weighted - a.top1).abs() < 1e-9);
        }
    }
}
