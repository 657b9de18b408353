//! Pseudolabel selection for target self-training.
//!
//! All confidence comparisons are strict (`conf > threshold` accepts).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pseudolabel sentinel for an abstained sample.
pub const ABSTAIN: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    MatchOrConf,
    Cons,
    ConsOrConf,
    ConsAndConf,
    MatchAndConsOrConf,
    ZeroShotOnly,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Cons,
        Scheme::ConsOrConf,
        Scheme::ConsAndConf,
        Scheme::ZeroShotOnly,
        Scheme::MatchOrConf,
        Scheme::MatchAndConsOrConf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::MatchOrConf => "match-or-conf",
            Scheme::Cons => "cons",
            Scheme::ConsOrConf => "cons-or-conf",
            Scheme::ConsAndConf => "cons-and-conf",
            Scheme::MatchAndConsOrConf => "match-and-cons-or-conf",
            Scheme::ZeroShotOnly => "zero-shot-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown pseudolabel scheme {s:?}")))
    }

    /// Whether the scheme needs masked student views.
    pub fn needs_views(self) -> bool {
        matches!(
            self,
            Scheme::Cons | Scheme::ConsOrConf | Scheme::ConsAndConf | Scheme::MatchAndConsOrConf
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeParams {
    pub gamma: f32,
    pub k: usize,
    pub t_conf: f32,
}

impl Default for SchemeParams {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            k: 2,
            t_conf: 0.5,
        }
    }
}

impl SchemeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.t_conf) {
            return Err(Error::config("gamma and t_conf must lie in [0, 1]"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub label: Option<usize>,
    pub student_pred: usize,
    pub student_conf: f32,
    pub teacher_pred: Option<usize>,
    pub teacher_conf: f32,
    pub scheme: Scheme,
}

impl PseudoLabel {
    /// The label with [`ABSTAIN`] for abstentions.
    pub fn value(&self) -> i64 {
        self.label.map_or(ABSTAIN, |l| l as i64)
    }
}

/// Four-case rule combining student and teacher predictions.
#[allow(clippy::if_same_then_else)]
pub fn match_or_conf(ya: usize, conf_a: f32, yt: usize, conf_t: f32, gamma: f32) -> Option<usize> {
    if ya == yt {
        Some(ya)
    } else if conf_a > gamma && conf_t <= gamma {
        Some(ya)
    } else if conf_a <= gamma && conf_t > gamma {
        Some(yt)
    } else {
        None
    }
}

/// `1` iff the pseudolabel is not an abstention.
pub fn selection_mask(pl: &PseudoLabel) -> f32 {
    if pl.label.is_some() {
        1.0
    } else {
        0.0
    }
}

/// Maximum softmax probability.
pub fn confidence_weight(student_softmax: &[f32]) -> f32 {
    student_softmax.iter().copied().fold(0.0, f32::max)
}

/// Masked-view consistency: every masked prediction equals the full one.
pub fn is_consistent(full_pred: usize, view_preds: &[usize]) -> bool {
    view_preds.iter().all(|&v| v == full_pred)
}

/// Student-side schemes and the combined consistency/match scheme.
///
/// `teacher` is required for [`Scheme::MatchAndConsOrConf`].
pub fn consistency_schemes(
    view_preds: &[usize],
    full_pred: usize,
    conf: f32,
    teacher: Option<(usize, f32)>,
    params: &SchemeParams,
    scheme: Scheme,
) -> Result<Option<usize>> {
    if view_preds.len() != params.k {
        return Err(Error::Batch(format!(
            "{} masked views given, scheme expects k = {}",
            view_preds.len(),
            params.k
        )));
    }
    let cons = is_consistent(full_pred, view_preds);
    let confident = conf > params.t_conf;
    let accept = |ok: bool| if ok { Some(full_pred) } else { None };
    Ok(match scheme {
        Scheme::Cons => accept(cons),
        Scheme::ConsOrConf => accept(cons || confident),
        Scheme::ConsAndConf => accept(cons && confident),
        Scheme::MatchAndConsOrConf => {
            let (yt, ct) = teacher.ok_or_else(|| Error::Batch("teacher prediction required".into()))?;
            let g = params.gamma;
            if full_pred == yt {
                accept(cons)
            } else if conf > g && ct <= g {
                Some(full_pred)
            } else if conf <= g && ct > g {
                Some(yt)
            } else {
                None
            }
        }
        other => return Err(Error::config(format!("{} is not a consistency scheme", other.name()))),
    })
}

/// Accepts the teacher's prediction iff its confidence exceeds `t_conf`.
pub fn zero_shot_only(teacher_pred: usize, conf: f32, t_conf: f32) -> Option<usize> {
    (conf > t_conf).then_some(teacher_pred)
}

/// Inputs for one target sample.
#[derive(Clone, Debug)]
pub struct Evidence<'a> {
    pub student_pred: usize,
    pub student_conf: f32,
    pub teacher: Option<(usize, f32)>,
    pub view_preds: &'a [usize],
}

/// Dispatches to the configured scheme.
pub fn pseudolabel(ev: &Evidence<'_>, params: &SchemeParams, scheme: Scheme) -> Result<PseudoLabel> {
    let need_teacher = || ev.teacher.ok_or_else(|| Error::Batch("teacher prediction required".into()));
    let label = match scheme {
        Scheme::MatchOrConf => {
            let (yt, ct) = need_teacher()?;
            match_or_conf(ev.student_pred, ev.student_conf, yt, ct, params.gamma)
        }
        Scheme::ZeroShotOnly => {
            let (yt, ct) = need_teacher()?;
            zero_shot_only(yt, ct, params.t_conf)
        }
        s => consistency_schemes(ev.view_preds, ev.student_pred, ev.student_conf, ev.teacher, params, s)?,
    };
    Ok(PseudoLabel {
        label,
        student_pred: ev.student_pred,
        student_conf: ev.student_conf,
        teacher_pred: ev.teacher.map(|t| t.0),
        teacher_conf: ev.teacher.map_or(0.0, |t| t.1),
        scheme,
    })
}

/// One row of the pseudolabel audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub step: u64,
    pub sample: usize,
    pub label: PseudoLabel,
    pub q: f32,
    pub truth: Option<usize>,
}

pub const AUDIT_HEADER: &str = "step,sample,student_pred,student_conf,teacher_pred,teacher_conf,pseudolabel,s,q,truth";

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from(AUDIT_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.label;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.sample,
            l.student_pred,
            l.student_conf,
            l.teacher_pred.map_or(ABSTAIN, |t| t as i64),
            l.teacher_conf,
            l.value(),
            selection_mask(l),
            r.q,
            r.truth.map_or(ABSTAIN, |t| t as i64),
        );
    }
    out
}
