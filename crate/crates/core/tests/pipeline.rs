use unite::config::{Span, UmtData};
use unite::experiment::{ExperimentConfig, Workspace};
use unite::pipeline::{run_stage1, run_stage2, run_stage3};
use unite::{Error, StageConfig, TrainState};

fn tiny() -> Workspace {
    let overlay = r#"{
        "source_per_class": 2,
        "target_train_per_class": 2,
        "target_test_per_class": 1,
        "pretrain_per_class": 1,
        "teacher_training": {"steps": 20, "batch_frames": 16, "warmup": 2},
        "stage1": {"total": {"iterations": 4}, "warmup": {"iterations": 1}},
        "stage2": {"total": {"iterations": 4}, "warmup": {"iterations": 1}},
        "stage3": {"total": {"iterations": 4}, "warmup": {"iterations": 1}}
    }"#;
    Workspace::prepare(ExperimentConfig::resolve(Some(overlay), Some(7)).unwrap()).unwrap()
}

fn head_trained(ws: &Workspace) -> unite::StudentModel {
    ws.stage2(ws.fresh_student().unwrap()).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ws = tiny();
    let before = ws.fresh_student().unwrap();
    let cfg = StageConfig {
        base_learning_rate: 0.0,
        ..ws.cfg.stage1.clone()
    };
    let (clips, cache) = ws.umt_data(UmtData::Target).unwrap();
    let mut state = TrainState::begin(before.clone(), &cfg).unwrap();
    run_stage1(&mut state, &ws.bundle, &clips, &cache, &cfg, None).unwrap();
    assert_eq!(state.step, 4);
    assert_eq!(state.model.params().fingerprint(), before.params().fingerprint());

    let trained = head_trained(&ws);
    let cfg = StageConfig {
        base_learning_rate: 0.0,
        ..ws.cfg.stage3.clone()
    };
    let mut state = TrainState::begin(trained.clone(), &cfg).unwrap();
    run_stage3(&mut state, &ws.bundle, &ws.source, &ws.target_train, &ws.target_cache, &cfg, None).unwrap();
    assert_eq!(state.model.params().fingerprint(), trained.params().fingerprint());
}

#[test]
fn resumed_self_training_is_bitwise_identical() {
    let ws = tiny();
    let cfg = &ws.cfg.stage3;
    let start = head_trained(&ws);

    let mut straight = TrainState::begin(start.clone(), cfg).unwrap();
    run_stage3(&mut straight, &ws.bundle, &ws.source, &ws.target_train, &ws.target_cache, cfg, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.uckp");
    let mut first = TrainState::begin(start, cfg).unwrap();
    run_stage3(&mut first, &ws.bundle, &ws.source, &ws.target_train, &ws.target_cache, cfg, Some(2)).unwrap();
    assert_eq!(first.step, 2);
    first.save(cfg, &path).unwrap();
    let (mut resumed, saved) = TrainState::load(&path).unwrap();
    assert_eq!(&saved, cfg);
    run_stage3(&mut resumed, &ws.bundle, &ws.source, &ws.target_train, &ws.target_cache, cfg, None).unwrap();

    assert_eq!(resumed.step, straight.step);
    assert_eq!(resumed.model.params().fingerprint(), straight.model.params().fingerprint());
    assert_eq!(resumed.metrics_csv(), straight.metrics_csv());
    assert_eq!(resumed.audit_csv(), straight.audit_csv());
}

#[test]
fn resumed_fine_tuning_is_bitwise_identical() {
    let ws = tiny();
    let cfg = &ws.cfg.stage2;
    let mut straight = TrainState::begin(ws.fresh_student().unwrap(), cfg).unwrap();
    run_stage2(&mut straight, &ws.source, cfg, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.uckp");
    let mut first = TrainState::begin(ws.fresh_student().unwrap(), cfg).unwrap();
    run_stage2(&mut first, &ws.source, cfg, Some(1)).unwrap();
    first.save(cfg, &path).unwrap();
    let (mut resumed, _) = TrainState::load(&path).unwrap();
    run_stage2(&mut resumed, &ws.source, cfg, None).unwrap();
    assert_eq!(resumed.model.params().fingerprint(), straight.model.params().fingerprint());
    assert_eq!(resumed.metrics_csv(), straight.metrics_csv());
}

#[test]
fn self_training_needs_a_trained_head() {
    let ws = tiny();
    let err = TrainState::begin(ws.fresh_student().unwrap(), &ws.cfg.stage3).unwrap_err();
    assert!(matches!(err, Error::StageOrder(_)), "{err}");

    let cfg = &ws.cfg.stage2;
    let mut state = TrainState::begin(ws.fresh_student().unwrap(), cfg).unwrap();
    let err = run_stage3(&mut state, &ws.bundle, &ws.source, &ws.target_train, &ws.target_cache, &ws.cfg.stage3, None)
        .unwrap_err();
    assert!(matches!(err, Error::StageOrder(_) | Error::Config(_)), "{err}");
}

#[test]
fn training_never_touches_the_teacher() {
    let ws = tiny();
    let before = ws.bundle.fingerprint();
    let model = ws.stage2(ws.stage1(UmtData::Target).unwrap()).unwrap();
    ws.stage3(model, &ws.cfg.stage3).unwrap();
    assert_eq!(ws.bundle.fingerprint(), before);
}

#[test]
fn distillation_loss_decreases() {
    let ws = tiny();
    let cfg = StageConfig {
        total: Span::Iterations(40),
        warmup: Span::Iterations(2),
        ..ws.cfg.stage1.clone()
    };
    let (clips, cache) = ws.umt_data(UmtData::Target).unwrap();
    let mut state = TrainState::begin(ws.fresh_student().unwrap(), &cfg).unwrap();
    run_stage1(&mut state, &ws.bundle, &clips, &cache, &cfg, None).unwrap();
    let losses: Vec<f32> = state.history.iter().map(|r| r.loss).collect();
    let head: f32 = losses[..5].iter().sum::<f32>() / 5.0;
    let tail: f32 = losses[losses.len() - 5..].iter().sum::<f32>() / 5.0;
    assert!(tail < head, "first {head} last {tail}");
}

#[test]
fn fine_tuning_fits_the_source() {
    let ws = tiny();
    let cfg = StageConfig {
        total: Span::Iterations(60),
        ..ws.cfg.stage2.clone()
    };
    let mut state = TrainState::begin(ws.fresh_student().unwrap(), &cfg).unwrap();
    run_stage2(&mut state, &ws.source, &cfg, None).unwrap();
    let first = state.history.first().unwrap().loss;
    let last = state.history.last().unwrap().loss;
    assert!(last < first, "first {first} last {last}");
    assert!(state.model.head_trained());
}
