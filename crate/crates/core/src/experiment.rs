//! End-to-end runs on a synthetic source→target shift: data, teacher,
//! the three stages and the ablation arms built from them.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{StageConfig, UmtData};
use crate::data::{class_names, derive_seed, generate, ClipGeometry, DomainSpec, LabeledSet, Motion, SyntheticDataset, UnlabeledSet};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, pseudolabel_audit, EvalReport, PseudolabelStats, ViewProtocol, ZeroShotPredictor};
use crate::pseudolabel::AuditRow;
use crate::objectives::AlignmentSpec;
use crate::pipeline::{run_stage1, run_stage2, run_stage3, TeacherBundle, TeacherCache, TrainState};
use crate::teacher::{train_teacher, Projections, TeacherConfig, TeacherTrainConfig};
use crate::vit::{StudentModel, ViTConfig};

/// Everything that defines one seeded experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub geometry: ClipGeometry,
    pub source_per_class: usize,
    pub target_train_per_class: usize,
    pub target_test_per_class: usize,
    pub pretrain_per_class: usize,
    pub teacher: TeacherConfig,
    pub teacher_training: TeacherTrainConfig,
    pub prototype_exemplars: usize,
    pub aligned_layers: usize,
    pub student: ViTConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl ExperimentConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            geometry: ClipGeometry::default(),
            source_per_class: 16,
            target_train_per_class: 16,
            target_test_per_class: 16,
            pretrain_per_class: 2,
            teacher: TeacherConfig::default(),
            teacher_training: TeacherTrainConfig {
                steps: 2400,
                batch_frames: 64,
                token_keep: 0.5,
                seed: derive_seed(seed, 0x7e, 0),
                ..TeacherTrainConfig::default()
            },
            prototype_exemplars: 1,
            aligned_layers: 2,
            student: ViTConfig::default(),
            stage1: StageConfig::desk_stage1(derive_seed(seed, 0x51, 1)),
            stage2: StageConfig::desk_stage2(derive_seed(seed, 0x51, 2)),
            stage3: StageConfig::desk_stage3(derive_seed(seed, 0x51, 3)),
        }
    }

    /// Desk defaults for the seed, overlaid with a partial JSON document.
    /// `seed` wins over a seed in the document; derived seeds follow it
    /// unless the document sets them explicitly.
    pub fn resolve(overlay: Option<&str>, seed: Option<u64>) -> Result<Self> {
        let mut doc = match overlay {
            Some(text) => serde_json::from_str::<Value>(text).map_err(|e| Error::Config(format!("config: {e}")))?,
            None => Value::Object(Default::default()),
        };
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("config: expected a JSON object".into()))?;
        let doc_seed = match obj.remove("seed") {
            Some(v) => Some(v.as_u64().ok_or_else(|| Error::Config("seed: expected an unsigned integer".into()))?),
            None => None,
        };
        let seed = seed.or(doc_seed).unwrap_or(0);
        let mut base = serde_json::to_value(Self::desk(seed))?;
        merge(&mut base, doc);
        let cfg: Self = serde_path_to_error::deserialize(base).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, st) in [&self.stage1, &self.stage2, &self.stage3].into_iter().enumerate() {
            st.validate()?;
            if st.stage as usize != i + 1 {
                return Err(Error::Config(format!("stage{}.stage: must be {}", i + 1, i + 1)));
            }
        }
        self.student.validate()?;
        self.teacher.validate()?;
        let s = &self.student;
        if s.frame_size != self.geometry.height || s.frame_size != self.geometry.width {
            return Err(Error::Config("student.frame_size: must match the clip geometry".into()));
        }
        if self.teacher.frame_size != s.frame_size || self.teacher.patch_size != s.patch_size {
            return Err(Error::Config("teacher: frame and patch size must match the student".into()));
        }
        if self.geometry.frames < 4 * s.frames {
            return Err(Error::Config("geometry.frames: clips need at least 4 frames per student frame".into()));
        }
        if self.source_per_class == 0 || self.target_train_per_class == 0 || self.target_test_per_class == 0 || self.pretrain_per_class == 0 {
            return Err(Error::Config("every split needs at least one clip per class".into()));
        }
        Ok(())
    }

    pub fn source_spec(&self) -> DomainSpec {
        DomainSpec::default_source(derive_seed(self.seed, 0xd5, 0))
    }

    pub fn target_spec(&self) -> DomainSpec {
        DomainSpec::default_target(derive_seed(self.seed, 0xd5, 1))
    }

    /// Same rendering as the target but disjoint clip seeds.
    pub fn target_test_spec(&self) -> DomainSpec {
        DomainSpec::default_target(derive_seed(self.seed, 0xd5, 2))
    }

    /// Rendering mixture the teacher is trained on.
    pub fn pretrain_specs(&self) -> Vec<DomainSpec> {
        DomainSpec::pretrain_mixture(derive_seed(self.seed, 0xd5, 3))
    }
}

/// Recursively overlays `over` onto `base`. An object whose keys are not
/// all known replaces a single-key base object (an enum variant switch) and
/// is merged key by key otherwise, so typos still surface as unknown fields.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let known = o.keys().all(|k| b.contains_key(k));
            if !known && b.len() == 1 {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// The generated splits of one experiment.
pub struct Datasets {
    pub source: SyntheticDataset,
    /// Target training clips. Labels are kept for auditing pseudolabels and
    /// never reach training code, which only sees [`UnlabeledSet`].
    pub target_train: SyntheticDataset,
    pub target_test: SyntheticDataset,
    /// One dataset per rendering of the teacher's pre-training mixture.
    pub pretrain: Vec<SyntheticDataset>,
}

impl Datasets {
    pub fn pretrain_set(&self) -> Result<LabeledSet> {
        let mut clips = Vec::new();
        for d in &self.pretrain {
            clips.extend(d.labeled()?.clips().iter().cloned());
        }
        LabeledSet::new(clips)
    }
}

impl ExperimentConfig {
    pub fn generate_data(&self) -> Result<Datasets> {
        let g = self.geometry;
        Ok(Datasets {
            source: generate(&self.source_spec(), &Motion::ALL, self.source_per_class, g)?,
            target_train: generate(&self.target_spec(), &Motion::ALL, self.target_train_per_class, g)?,
            target_test: generate(&self.target_test_spec(), &Motion::ALL, self.target_test_per_class, g)?,
            pretrain: self
                .pretrain_specs()
                .iter()
                .map(|s| generate(s, &Motion::ALL, self.pretrain_per_class, g))
                .collect::<Result<_>>()?,
        })
    }

    /// Trains the teacher on `pretrain` and derives prototypes, projections
    /// and the alignment spec.
    pub fn train_bundle(&self, pretrain: &LabeledSet) -> Result<TeacherBundle> {
        let (teacher, _) = train_teacher(self.teacher.clone(), pretrain, &self.teacher_training)?;
        let prototypes =
            teacher.build_prototypes(&self.pretrain_specs(), self.geometry, self.prototype_exemplars, class_names())?;
        let projections = Projections::orthogonal(
            self.aligned_layers,
            self.student.embed_dim,
            self.teacher.embed_dim,
            derive_seed(self.seed, 0x9c, 0),
        )?;
        let alignment =
            AlignmentSpec::last_layers(self.aligned_layers, self.student.depth, self.teacher.depth, self.stage1.masking_ratio)?;
        Ok(TeacherBundle {
            teacher,
            prototypes,
            projections,
            alignment,
        })
    }
}

/// Datasets, frozen teacher and teacher caches shared by every arm.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub names: Vec<String>,
    pub source: LabeledSet,
    pub target_train: UnlabeledSet,
    /// Ground truth of `target_train`, used only to audit pseudolabels.
    pub target_train_truth: Option<Vec<usize>>,
    pub target_test: LabeledSet,
    pub bundle: TeacherBundle,
    pub target_cache: TeacherCache,
    pub source_cache: TeacherCache,
}

impl Workspace {
    /// Generates the data and trains the teacher from `cfg` alone.
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self> {
        let data = cfg.generate_data()?;
        let bundle = cfg.train_bundle(&data.pretrain_set()?)?;
        Self::new(cfg, &data.source, &data.target_train, &data.target_test, bundle)
    }

    /// Builds the teacher caches over already available data.
    pub fn new(
        cfg: ExperimentConfig,
        source: &SyntheticDataset,
        target_train: &SyntheticDataset,
        target_test: &SyntheticDataset,
        bundle: TeacherBundle,
    ) -> Result<Self> {
        let source = source.labeled()?;
        let target_test = target_test.labeled()?;
        let target_train_truth = target_train.clips().iter().map(|c| c.label()).collect();
        let target_train = target_train.unlabeled();
        let target_cache = TeacherCache::build(&bundle.teacher, target_train.clips())?;
        let source_cache = TeacherCache::build(&bundle.teacher, source.clips())?;
        Ok(Self {
            cfg,
            names: class_names(),
            source,
            target_train,
            target_train_truth,
            target_test,
            bundle,
            target_cache,
            source_cache,
        })
    }

    pub fn protocol(&self) -> ViewProtocol {
        ViewProtocol::standard(self.cfg.student.frames, self.cfg.student.frame_size)
    }

    pub fn fresh_student(&self) -> Result<StudentModel> {
        StudentModel::new(self.cfg.student.clone(), derive_seed(self.cfg.seed, 0x57d, 0))
    }

    /// Clips and teacher cache for masked distillation on `data`.
    pub fn umt_data(&self, data: UmtData) -> Option<(UnlabeledSet, TeacherCache)> {
        let src = || UnlabeledSet::new(self.source.clips().iter().map(|c| c.without_label()));
        match data {
            UmtData::None => None,
            UmtData::Target => Some((self.target_train.clone(), self.target_cache.clone())),
            UmtData::Source => Some((src(), self.source_cache.clone())),
            UmtData::SourceTarget => Some((src().concat(&self.target_train), self.source_cache.concat(&self.target_cache))),
        }
    }

    /// Precision and coverage of logged pseudolabels against the withheld
    /// target labels, when those are available.
    pub fn pseudolabel_stats(&self, rows: &[AuditRow]) -> Result<Option<PseudolabelStats>> {
        match self.target_train_truth.as_ref() {
            Some(truth) => Ok(Some(pseudolabel_audit(rows, truth)?)),
            None => Ok(None),
        }
    }

    /// Stage 1 on the chosen data; `UmtData::None` returns the fresh student.
    pub fn stage1(&self, data: UmtData) -> Result<StudentModel> {
        let model = self.fresh_student()?;
        let Some((clips, cache)) = self.umt_data(data) else {
            return Ok(model);
        };
        let mut state = TrainState::begin(model, &self.cfg.stage1)?;
        run_stage1(&mut state, &self.bundle, &clips, &cache, &self.cfg.stage1, None)?;
        Ok(state.model)
    }

    pub fn stage2(&self, model: StudentModel) -> Result<StudentModel> {
        let mut state = TrainState::begin(model, &self.cfg.stage2)?;
        run_stage2(&mut state, &self.source, &self.cfg.stage2, None)?;
        Ok(state.model)
    }

    pub fn stage3(&self, model: StudentModel, cfg: &StageConfig) -> Result<TrainState> {
        let mut state = TrainState::begin(model, cfg)?;
        run_stage3(&mut state, &self.bundle, &self.source, &self.target_train, &self.target_cache, cfg, None)?;
        Ok(state)
    }

    pub fn evaluate(&self, model: &StudentModel) -> Result<EvalReport> {
        evaluate(model, &self.target_test, &self.names, &self.protocol())
    }

    pub fn evaluate_teacher(&self) -> Result<EvalReport> {
        let zs = ZeroShotPredictor {
            teacher: &self.bundle.teacher,
            prototypes: &self.bundle.prototypes,
        };
        evaluate(&zs, &self.target_test, &self.names, &self.protocol())
    }
}

/// Target accuracies of the ablation arms for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seed: u64,
    pub source_only: f64,
    pub stage1_only: f64,
    pub stage3_only: f64,
    pub full: f64,
    pub unmasked_target: f64,
    pub no_source: f64,
    pub teacher_zero_shot: f64,
}

impl AblationResult {
    pub const CSV_HEADER: &'static str =
        "seed,source_only,stage1_only,stage3_only,full,unmasked_target,no_source,teacher_zero_shot";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.seed,
            self.source_only,
            self.stage1_only,
            self.stage3_only,
            self.full,
            self.unmasked_target,
            self.no_source,
            self.teacher_zero_shot
        )
    }
}

/// Runs every arm of the stage, masking and source-loss ablations.
pub fn run_ablations(cfg: ExperimentConfig) -> Result<AblationResult> {
    let ws = Workspace::prepare(cfg)?;
    let s3 = ws.cfg.stage3.clone();
    let scratch = ws.stage2(ws.fresh_student()?)?;
    let source_only = ws.evaluate(&scratch)?.top1;
    let stage3_only = ws.evaluate(&ws.stage3(scratch, &s3)?.model)?.top1;
    let pretrained = ws.stage2(ws.stage1(UmtData::Target)?)?;
    let stage1_only = ws.evaluate(&pretrained)?.top1;
    let full = ws.evaluate(&ws.stage3(pretrained.clone(), &s3)?.model)?.top1;
    let unmasked = StageConfig {
        masked_target_loss: false,
        ..s3.clone()
    };
    let unmasked_target = ws.evaluate(&ws.stage3(pretrained.clone(), &unmasked)?.model)?.top1;
    let no_src = StageConfig { source_loss: false, ..s3 };
    let no_source = ws.evaluate(&ws.stage3(pretrained, &no_src)?.model)?.top1;
    let teacher_zero_shot = ws.evaluate_teacher()?.top1;
    Ok(AblationResult {
        seed: ws.cfg.seed,
        source_only,
        stage1_only,
        stage3_only,
        full,
        unmasked_target,
        no_source,
        teacher_zero_shot,
    })
}
