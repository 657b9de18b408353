//! Stage hyperparameters and their full-scale and desk-scale presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::{Scheme, SchemeParams};

/// A warmup or training length, either in passes over the data or in
/// optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Span {
    Epochs(u64),
    Iterations(u64),
}

impl Span {
    /// Optimizer steps for a dataset of `len` items drawn `batch` at a time.
    pub fn steps(self, len: usize, batch: usize) -> u64 {
        match self {
            Span::Iterations(n) => n,
            Span::Epochs(e) => e * steps_per_epoch(len, batch),
        }
    }
}

pub fn steps_per_epoch(len: usize, batch: usize) -> u64 {
    len.div_ceil(batch.max(1)).max(1) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
}

/// Data used for masked distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UmtData {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "source")]
    Source,
    #[serde(rename = "target")]
    Target,
    #[serde(rename = "source+target")]
    SourceTarget,
}

impl UmtData {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::config(format!("unknown stage-1 data choice {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandAug {
    pub magnitude: u32,
    pub num_ops: u32,
}

/// Hyperparameters of one stage. Stage-specific fields are ignored by the
/// other stages. Drop path, flips, resize scales, RandAug and random erase
/// are recorded but not applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub learning_rate_schedule: Schedule,
    pub base_learning_rate: f32,
    /// When set, the learning rate is `base · batch / lr_reference_batch`.
    #[serde(default)]
    pub lr_reference_batch: Option<usize>,
    /// Clips per step in stages 1 and 2.
    pub batch_size: usize,
    pub warmup: Span,
    pub total: Span,
    pub optimizer_betas: [f32; 2],
    pub weight_decay: f32,
    pub drop_path: f32,
    #[serde(default)]
    pub layer_wise_lr_decay: Option<f32>,
    #[serde(default)]
    pub horizontal_flip: bool,
    #[serde(default)]
    pub random_resize_scales: Vec<f32>,
    pub masking_ratio: f32,
    #[serde(default)]
    pub random_erase: f32,
    #[serde(default)]
    pub rand_aug: Option<RandAug>,
    #[serde(default = "default_split_batch")]
    pub source_batch_size: usize,
    #[serde(default = "default_split_batch")]
    pub target_batch_size: usize,
    #[serde(default = "default_split_batch")]
    pub masked_target_batch_size: usize,
    /// λ, the weight of the target term.
    #[serde(default = "one")]
    pub loss_coefficient: f32,
    /// γ of the match-or-confidence rule.
    #[serde(default = "default_gamma")]
    pub matchorconf_threshold: f32,
    #[serde(default = "default_scheme")]
    pub pseudolabel_scheme: Scheme,
    /// Masked views per target for the consistency schemes.
    #[serde(default = "default_views")]
    pub consistency_views: usize,
    /// Fixed threshold of the confidence-only schemes and conventional
    /// self-training.
    #[serde(default = "default_t_conf")]
    pub fixed_confidence_threshold: f32,
    #[serde(default = "yes")]
    pub source_loss: bool,
    #[serde(default = "yes")]
    pub masked_target_loss: bool,
    #[serde(default)]
    pub conventional_self_training: bool,
    #[serde(default = "default_umt_data")]
    pub umt_data: UmtData,
    pub seed: u64,
}

fn default_split_batch() -> usize {
    8
}
fn one() -> f32 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_gamma() -> f32 {
    0.1
}
fn default_scheme() -> Scheme {
    Scheme::MatchOrConf
}
fn default_views() -> usize {
    2
}
fn default_t_conf() -> f32 {
    0.5
}
fn default_umt_data() -> UmtData {
    UmtData::Target
}

impl StageConfig {
    /// Masked distillation at full scale (50 epochs, batch 256).
    pub fn full_scale_stage1(seed: u64) -> Self {
        Self {
            stage: 1,
            learning_rate_schedule: Schedule::Cosine,
            base_learning_rate: 1.5e-4,
            lr_reference_batch: Some(256),
            batch_size: 256,
            warmup: Span::Epochs(10),
            total: Span::Epochs(50),
            optimizer_betas: [0.9, 0.95],
            weight_decay: 0.05,
            drop_path: 0.1,
            layer_wise_lr_decay: None,
            horizontal_flip: true,
            random_resize_scales: vec![0.66, 0.75, 0.875, 1.0],
            masking_ratio: 0.8,
            random_erase: 0.0,
            rand_aug: None,
            source_batch_size: default_split_batch(),
            target_batch_size: default_split_batch(),
            masked_target_batch_size: default_split_batch(),
            loss_coefficient: 1.0,
            matchorconf_threshold: default_gamma(),
            pseudolabel_scheme: default_scheme(),
            consistency_views: default_views(),
            fixed_confidence_threshold: default_t_conf(),
            source_loss: true,
            masked_target_loss: true,
            conventional_self_training: false,
            umt_data: UmtData::Target,
            seed,
        }
    }

    /// Source fine-tuning at full scale.
    pub fn full_scale_stage2(seed: u64) -> Self {
        Self {
            stage: 2,
            base_learning_rate: 2.5e-5,
            lr_reference_batch: None,
            batch_size: 28,
            warmup: Span::Iterations(4000),
            total: Span::Iterations(20_000),
            optimizer_betas: [0.9, 0.999],
            layer_wise_lr_decay: Some(0.65),
            horizontal_flip: false,
            random_resize_scales: Vec::new(),
            random_erase: 0.25,
            rand_aug: Some(RandAug { magnitude: 7, num_ops: 4 }),
            ..Self::full_scale_stage1(seed)
        }
    }

    /// Collaborative self-training at full scale.
    pub fn full_scale_stage3(seed: u64) -> Self {
        Self {
            stage: 3,
            base_learning_rate: 1e-5,
            batch_size: 40,
            optimizer_betas: [0.9, 0.95],
            layer_wise_lr_decay: Some(0.75),
            source_batch_size: 20,
            target_batch_size: 20,
            masked_target_batch_size: 20,
            ..Self::full_scale_stage2(seed)
        }
    }

    /// Desk-scale masked distillation.
    pub fn desk_stage1(seed: u64) -> Self {
        Self {
            base_learning_rate: 1e-3,
            lr_reference_batch: None,
            batch_size: 8,
            warmup: Span::Epochs(5),
            total: Span::Epochs(60),
            ..Self::full_scale_stage1(seed)
        }
    }

    /// Desk-scale source fine-tuning.
    pub fn desk_stage2(seed: u64) -> Self {
        Self {
            base_learning_rate: 1e-3,
            batch_size: 8,
            warmup: Span::Iterations(40),
            total: Span::Iterations(800),
            ..Self::full_scale_stage2(seed)
        }
    }

    /// Desk-scale collaborative self-training.
    pub fn desk_stage3(seed: u64) -> Self {
        Self {
            base_learning_rate: 5e-4,
            batch_size: 16,
            warmup: Span::Iterations(30),
            total: Span::Iterations(300),
            source_batch_size: 8,
            target_batch_size: 8,
            masked_target_batch_size: 8,
            ..Self::full_scale_stage3(seed)
        }
    }

    /// Parses JSON, reporting the key path of the first offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stage config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("{key}: {msg}")));
        if !(1..=3).contains(&self.stage) {
            return bad("stage", "must be 1, 2 or 3");
        }
        if !(self.base_learning_rate >= 0.0 && self.base_learning_rate.is_finite()) {
            return bad("base_learning_rate", "must be finite and non-negative");
        }
        if self.lr_reference_batch == Some(0) {
            return bad("lr_reference_batch", "must be positive");
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("source_batch_size", self.source_batch_size),
            ("target_batch_size", self.target_batch_size),
            ("masked_target_batch_size", self.masked_target_batch_size),
            ("consistency_views", self.consistency_views),
        ] {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if self.masked_target_batch_size != self.target_batch_size {
            return bad("masked_target_batch_size", "every target is masked once, so it must equal target_batch_size");
        }
        match (self.warmup, self.total) {
            (Span::Epochs(w), Span::Epochs(t)) | (Span::Iterations(w), Span::Iterations(t)) => {
                if w > t {
                    return bad("warmup", "exceeds total");
                }
                if t == 0 {
                    return bad("total", "must be positive");
                }
            }
            _ => return bad("warmup", "must use the same unit as total"),
        }
        let [b1, b2] = self.optimizer_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("optimizer_betas", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if let Some(d) = self.layer_wise_lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return bad("layer_wise_lr_decay", "must lie in (0, 1]");
            }
        }
        if !(self.masking_ratio > 0.0 && self.masking_ratio < 1.0) {
            return bad("masking_ratio", "must lie in (0, 1)");
        }
        if !(self.loss_coefficient >= 0.0) {
            return bad("loss_coefficient", "must be non-negative");
        }
        self.scheme_params().validate()
    }

    pub fn scheme_params(&self) -> SchemeParams {
        SchemeParams {
            gamma: self.matchorconf_threshold,
            k: self.consistency_views,
            t_conf: self.fixed_confidence_threshold,
        }
    }

    /// Clips drawn per step from the main stream of the stage.
    pub fn step_batch(&self) -> usize {
        if self.stage == 3 {
            self.target_batch_size
        } else {
            self.batch_size
        }
    }

    /// `(warmup, total)` in optimizer steps for a dataset of `len` items.
    pub fn step_counts(&self, len: usize) -> (u64, u64) {
        let b = self.step_batch();
        (self.warmup.steps(len, b), self.total.steps(len, b))
    }

    pub fn effective_lr(&self) -> f32 {
        match self.lr_reference_batch {
            Some(r) => self.base_learning_rate * self.step_batch() as f32 / r as f32,
            None => self.base_learning_rate,
        }
    }

    pub fn betas(&self) -> (f32, f32) {
        (self.optimizer_betas[0], self.optimizer_betas[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [
            StageConfig::full_scale_stage1(0),
            StageConfig::full_scale_stage2(0),
            StageConfig::full_scale_stage3(0),
            StageConfig::desk_stage1(0),
            StageConfig::desk_stage2(0),
            StageConfig::desk_stage3(0),
        ] {
            cfg.validate().unwrap();
            assert_eq!(StageConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
    }

    #[test]
    fn full_scale_values() {
        let s1 = StageConfig::full_scale_stage1(0);
        assert_eq!((s1.base_learning_rate, s1.batch_size), (1.5e-4, 256));
        assert_eq!((s1.warmup, s1.total), (Span::Epochs(10), Span::Epochs(50)));
        assert_eq!(s1.optimizer_betas, [0.9, 0.95]);
        assert_eq!(s1.masking_ratio, 0.8);
        assert_eq!(s1.random_resize_scales, vec![0.66, 0.75, 0.875, 1.0]);
        assert!(s1.horizontal_flip);
        let s2 = StageConfig::full_scale_stage2(0);
        assert_eq!((s2.base_learning_rate, s2.batch_size), (2.5e-5, 28));
        assert_eq!((s2.warmup, s2.total), (Span::Iterations(4000), Span::Iterations(20_000)));
        assert_eq!(s2.optimizer_betas, [0.9, 0.999]);
        assert_eq!(s2.layer_wise_lr_decay, Some(0.65));
        assert_eq!(s2.random_erase, 0.25);
        assert_eq!(s2.rand_aug, Some(RandAug { magnitude: 7, num_ops: 4 }));
        let s3 = StageConfig::full_scale_stage3(0);
        assert_eq!(s3.base_learning_rate, 1e-5);
        assert_eq!(s3.optimizer_betas, [0.9, 0.95]);
        assert_eq!(s3.layer_wise_lr_decay, Some(0.75));
        assert_eq!((s3.source_batch_size, s3.target_batch_size, s3.masked_target_batch_size), (20, 20, 20));
        assert_eq!((s3.matchorconf_threshold, s3.loss_coefficient), (0.1, 1.0));
        for s in [s1, s2, s3] {
            assert_eq!((s.weight_decay, s.drop_path), (0.05, 0.1));
        }
    }

    #[test]
    fn errors_name_the_key() {
        let mut v: serde_json::Value = serde_json::from_str(&StageConfig::desk_stage2(0).to_json()).unwrap();
        v["optimizer_betas"] = serde_json::json!(["a", 0.9]);
        let err = StageConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("optimizer_betas"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&StageConfig::desk_stage2(0).to_json()).unwrap();
        v["warmup"] = serde_json::json!({"iterations": 5000});
        let err = StageConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("warmup"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&StageConfig::desk_stage3(0).to_json()).unwrap();
        v["target_batch_size"] = serde_json::json!(0);
        assert!(StageConfig::from_json(&v.to_string()).is_err());

        let mut v: serde_json::Value = serde_json::from_str(&StageConfig::desk_stage3(0).to_json()).unwrap();
        v["bogus_key"] = serde_json::json!(1);
        let err = StageConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("bogus_key"), "{err}");
    }

    #[test]
    fn epochs_scale_with_data() {
        let cfg = StageConfig::desk_stage1(0);
        assert_eq!(cfg.step_counts(64), (40, 480));
        assert_eq!(cfg.step_counts(65), (45, 540));
        assert_eq!(StageConfig::desk_stage2(0).step_counts(1), (40, 800));
    }

    #[test]
    fn batch_ratio_scaling() {
        let mut cfg = StageConfig::full_scale_stage1(0);
        assert_eq!(cfg.effective_lr(), 1.5e-4);
        cfg.batch_size = 128;
        assert!((cfg.effective_lr() - 0.75e-4).abs() < 1e-12);
    }

    #[test]
    fn umt_data_names() {
        assert_eq!(UmtData::parse("source+target").unwrap(), UmtData::SourceTarget);
        assert!(UmtData::parse("both").is_err());
    }
}
