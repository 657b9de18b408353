//! `unite`: data generation, teacher training, the three adaptation stages,
//! evaluation, sweeps and reports over a run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use unite::data::{write_manifest, SyntheticDataset};
use unite::evaluation::{evaluate, median, EvalReport, ViewProtocol, ZeroShotPredictor};
use unite::experiment::{run_ablations, AblationResult, ExperimentConfig, Workspace};
use unite::io_util::write_atomic;
use unite::pipeline::{run_stage1, run_stage2, run_stage3, TeacherBundle};
use unite::{Error, StageConfig, TrainState};

#[derive(Parser)]
#[command(name = "unite", version, about = "Video domain adaptation with a frozen spatial teacher")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Partial experiment config (JSON) overlaid on the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment seed; overrides a seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory receiving every output.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Single-threaded execution with bitwise reproducible outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for data-parallel producers.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Dataset root; defaults to `<out>/data`.
    #[arg(long, global = true, env = "UNITE_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the source, target and pre-training datasets.
    GenData,
    /// Train the frozen teacher and derive its prototypes.
    TrainTeacher,
    /// Stage 1: masked teacher distillation.
    Pretrain(StageArgs),
    /// Stage 2: supervised fine-tuning on the source domain.
    Finetune(FinetuneArgs),
    /// Stage 3: collaborative self-training.
    Selftrain(StageArgs),
    /// Target accuracy of a student checkpoint or of the teacher.
    Eval(EvalArgs),
    /// Stage 3 over a grid of one parameter.
    Sweep(SweepArgs),
    /// Every ablation arm for each seed.
    Ablate(AblateArgs),
    /// Rebuild the summary tables from persisted outputs.
    Report,
}

#[derive(Args)]
struct StageArgs {
    /// Stop after this many optimizer steps; rerunning resumes.
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Start from a fresh student instead of the stage 1 checkpoint.
    #[arg(long)]
    from_scratch: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Predictor {
    Student,
    Teacher,
    /// Reads the ground truth; checks the protocol plumbing.
    Oracle,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "student")]
    predictor: Predictor,
    /// Student training-state checkpoint; defaults to the latest stage.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Labeled dataset; defaults to the target test split.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// One centre view instead of the 4×3 protocol.
    #[arg(long)]
    single_view: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Gamma,
    Lambda,
    MaskingRatio,
    Scheme,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Lambda => "lambda",
            SweepParam::MaskingRatio => "masking_ratio",
            SweepParam::Scheme => "scheme",
        }
    }

    fn apply(self, cfg: &mut StageConfig, value: &str) -> Result<()> {
        let num = || value.parse::<f32>().with_context(|| format!("{}: bad value {value:?}", self.name()));
        match self {
            SweepParam::Gamma => cfg.matchorconf_threshold = num()?,
            SweepParam::Lambda => cfg.loss_coefficient = num()?,
            SweepParam::MaskingRatio => cfg.masking_ratio = num()?,
            SweepParam::Scheme => {
                cfg.pseudolabel_scheme = serde_json::from_value(serde_json::Value::String(value.to_string()))
                    .map_err(|e| Error::Config(format!("scheme: {e}")))?
            }
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated grid.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
}

/// Written to the command's output directory before any training.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<String>,
    experiment: &'a ExperimentConfig,
    stage_config: Option<&'a StageConfig>,
    seed: u64,
    input_hash: String,
    output_dir: String,
    deterministic: bool,
    threads: usize,
    version: &'static str,
}

struct Ctx {
    global: Global,
    cfg: ExperimentConfig,
}

impl Ctx {
    fn new(global: Global) -> Result<Self> {
        let text = match &global.config {
            Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?),
            None => None,
        };
        let cfg = ExperimentConfig::resolve(text.as_deref(), global.seed)?;
        Ok(Self { global, cfg })
    }

    fn out(&self, sub: &str) -> Result<PathBuf> {
        let dir = self.global.out.join(sub);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn data_dir(&self) -> PathBuf {
        self.global.data_dir.clone().unwrap_or_else(|| self.global.out.join("data"))
    }

    fn teacher_dir(&self) -> PathBuf {
        self.global.out.join("teacher")
    }

    fn stage_state(&self, stage: u8) -> PathBuf {
        self.global.out.join(format!("stage{stage}")).join("state.uckp")
    }

    fn manifest(&self, command: &str, dir: &Path, stage: Option<&StageConfig>, inputs: &[PathBuf]) -> Result<()> {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(serde_json::to_vec(&self.cfg)?);
        for p in inputs {
            h.update(p.to_string_lossy().as_bytes());
            h.update(hash_path(p)?);
        }
        let m = RunManifest {
            command,
            config_path: self.global.config.as_ref().map(|p| p.display().to_string()),
            experiment: &self.cfg,
            stage_config: stage,
            seed: self.cfg.seed,
            input_hash: hex::encode(h.finalize()),
            output_dir: dir.display().to_string(),
            deterministic: self.global.deterministic,
            threads: self.global.threads,
            version: env!("CARGO_PKG_VERSION"),
        };
        write_json(&dir.join("manifest.json"), &m)
    }

    fn load_data(&self, name: &str) -> Result<SyntheticDataset> {
        let path = self.data_dir().join(format!("{name}.uvd"));
        if !path.exists() {
            return Err(Error::Dependency(format!("{} is missing; run gen-data first", path.display())).into());
        }
        let d = SyntheticDataset::load(&path)?;
        if d.geometry() != Some(self.cfg.geometry) {
            return Err(Error::Config(format!("geometry: {} does not match the configured clip geometry", path.display())).into());
        }
        Ok(d)
    }

    fn load_bundle(&self) -> Result<TeacherBundle> {
        let dir = self.teacher_dir();
        if !dir.exists() {
            return Err(Error::Dependency(format!("{} is missing; run train-teacher first", dir.display())).into());
        }
        Ok(TeacherBundle::load(&dir)?)
    }

    fn workspace(&self) -> Result<Workspace> {
        let bundle = self.load_bundle()?;
        let (s, tt, te) = (self.load_data("source")?, self.load_data("target_train")?, self.load_data("target_test")?);
        Ok(Workspace::new(self.cfg.clone(), &s, &tt, &te, bundle)?)
    }

    fn load_state(&self, stage: u8) -> Result<TrainState> {
        let path = self.stage_state(stage);
        if !path.exists() {
            return Err(Error::Dependency(format!("{} is missing; run stage {stage} first", path.display())).into());
        }
        Ok(TrainState::load(&path)?.0)
    }
}

fn hash_path(p: &Path) -> Result<Vec<u8>> {
    let mut h = Sha256::new();
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            h.update(e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
            h.update(hash_path(&e)?);
        }
    } else if p.exists() {
        h.update(fs::read(p)?);
    }
    Ok(h.finalize().to_vec())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let dir = ctx.data_dir();
    fs::create_dir_all(dir.join("pretrain"))?;
    ctx.manifest("gen-data", &dir, None, &[])?;
    let data = ctx.cfg.generate_data()?;
    data.source.save(&dir.join("source.uvd"))?;
    data.target_train.save(&dir.join("target_train.uvd"))?;
    data.target_test.save(&dir.join("target_test.uvd"))?;
    for (i, d) in data.pretrain.iter().enumerate() {
        d.save(&dir.join("pretrain").join(format!("{i:02}.uvd")))?;
    }
    write_manifest(&dir.join("classes.txt"), &data.source.class_names)?;
    println!(
        "wrote {} source, {} target train, {} target test and {} pre-training clips to {}",
        data.source.len(),
        data.target_train.len(),
        data.target_test.len(),
        data.pretrain.iter().map(SyntheticDataset::len).sum::<usize>(),
        dir.display()
    );
    Ok(())
}

fn train_teacher(ctx: &Ctx) -> Result<()> {
    let pre_dir = ctx.data_dir().join("pretrain");
    if !pre_dir.exists() {
        return Err(Error::Dependency(format!("{} is missing; run gen-data first", pre_dir.display())).into());
    }
    let dir = ctx.out("teacher")?;
    ctx.manifest("train-teacher", &dir, None, std::slice::from_ref(&pre_dir))?;
    let mut files: Vec<PathBuf> = fs::read_dir(&pre_dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    files.sort();
    let mut clips = Vec::new();
    for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "uvd")) {
        clips.extend(SyntheticDataset::load(f)?.labeled()?.clips().iter().cloned());
    }
    let pretrain = unite::data::LabeledSet::new(clips)?;
    let bundle = ctx.cfg.train_bundle(&pretrain)?;
    bundle.save(&dir)?;
    println!("teacher {} saved to {}", bundle.fingerprint(), dir.display());
    Ok(())
}

/// Resumes a partial run of `stage` when one exists for the same config,
/// otherwise starts from `init`.
fn start_or_resume(dir: &Path, cfg: &StageConfig, init: impl FnOnce() -> Result<TrainState>) -> Result<TrainState> {
    let partial = dir.join("partial.uckp");
    if partial.exists() {
        let (state, saved) = TrainState::load(&partial)?;
        if &saved == cfg {
            eprintln!("resuming stage {} at step {}", cfg.stage, state.step);
            return Ok(state);
        }
        eprintln!("ignoring {}: it was written with a different config", partial.display());
    }
    init()
}

/// Persists the state: a partial checkpoint when stopped early, otherwise the
/// final checkpoint with metrics and summary.
fn finish_stage(ws: &Workspace, dir: &Path, state: &TrainState, cfg: &StageConfig) -> Result<()> {
    let (_, total) = match cfg.stage {
        1 => {
            let n = ws.umt_data(cfg.umt_data).map_or(0, |(c, _)| c.len());
            cfg.step_counts(n)
        }
        2 => cfg.step_counts(ws.source.len()),
        _ => cfg.step_counts(ws.target_train.len()),
    };
    let partial = dir.join("partial.uckp");
    if state.step < total {
        state.save(cfg, &partial)?;
        println!("stage {} stopped at step {}/{}; rerun to resume", cfg.stage, state.step, total);
        return Ok(());
    }
    state.save(cfg, &dir.join("state.uckp"))?;
    write_atomic(&dir.join("metrics.csv"), state.metrics_csv().as_bytes())?;
    let mut summary = serde_json::to_value(state.summary(Some(&ws.bundle)))?;
    if cfg.stage == 3 {
        write_atomic(&dir.join("audit.csv"), state.audit_csv().as_bytes())?;
        if let Some(stats) = ws.pseudolabel_stats(&state.audit)? {
            summary["pseudolabels"] = serde_json::to_value(stats)?;
        }
    }
    write_json(&dir.join("summary.json"), &summary)?;
    if partial.exists() {
        fs::remove_file(&partial)?;
    }
    println!("stage {} finished after {} steps", cfg.stage, state.step);
    Ok(())
}

fn pretrain(ctx: &Ctx, args: &StageArgs) -> Result<()> {
    let ws = ctx.workspace()?;
    let cfg = &ctx.cfg.stage1;
    let dir = ctx.out("stage1")?;
    ctx.manifest("pretrain", &dir, Some(cfg), &[ctx.data_dir(), ctx.teacher_dir()])?;
    let (clips, cache) = ws
        .umt_data(cfg.umt_data)
        .ok_or_else(|| Error::Config("stage1.umt_data: pretrain needs data; use finetune --from-scratch to skip it".into()))?;
    let mut state = start_or_resume(&dir, cfg, || Ok(TrainState::begin(ws.fresh_student()?, cfg)?))?;
    run_stage1(&mut state, &ws.bundle, &clips, &cache, cfg, args.until)?;
    finish_stage(&ws, &dir, &state, cfg)
}

fn finetune(ctx: &Ctx, args: &FinetuneArgs) -> Result<()> {
    let ws = ctx.workspace()?;
    let cfg = &ctx.cfg.stage2;
    let dir = ctx.out("stage2")?;
    let mut inputs = vec![ctx.data_dir(), ctx.teacher_dir()];
    if !args.from_scratch {
        inputs.push(ctx.stage_state(1));
    }
    ctx.manifest("finetune", &dir, Some(cfg), &inputs)?;
    let mut state = start_or_resume(&dir, cfg, || {
        let model = if args.from_scratch { ws.fresh_student()? } else { ctx.load_state(1)?.model };
        Ok(TrainState::begin(model, cfg)?)
    })?;
    run_stage2(&mut state, &ws.source, cfg, args.stage.until)?;
    finish_stage(&ws, &dir, &state, cfg)
}

fn selftrain(ctx: &Ctx, args: &StageArgs) -> Result<()> {
    let ws = ctx.workspace()?;
    let cfg = &ctx.cfg.stage3;
    let dir = ctx.out("stage3")?;
    ctx.manifest("selftrain", &dir, Some(cfg), &[ctx.data_dir(), ctx.teacher_dir(), ctx.stage_state(2)])?;
    let mut state = start_or_resume(&dir, cfg, || Ok(TrainState::begin(ctx.load_state(2)?.model, cfg)?))?;
    run_stage3(&mut state, &ws.bundle, &ws.source, &ws.target_train, &ws.target_cache, cfg, args.until)?;
    finish_stage(&ws, &dir, &state, cfg)
}

fn latest_state(ctx: &Ctx) -> Result<PathBuf> {
    (1..=3u8)
        .rev()
        .map(|s| ctx.stage_state(s))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Dependency("no stage checkpoint found; train a stage first".into()).into())
}

fn eval(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let dataset = args.dataset.clone().unwrap_or_else(|| ctx.data_dir().join("target_test.uvd"));
    if !dataset.exists() {
        return Err(Error::Dependency(format!("{} is missing; run gen-data first", dataset.display())).into());
    }
    let data = SyntheticDataset::load(&dataset)?;
    let labeled = data.labeled()?;
    let names = data.class_names.clone();
    let s = &ctx.cfg.student;
    let protocol = if args.single_view {
        ViewProtocol::single(s.frames, s.frame_size)
    } else {
        ViewProtocol::standard(s.frames, s.frame_size)
    };
    let dir = ctx.out("eval")?;
    let (name, report): (String, EvalReport) = match args.predictor {
        Predictor::Student => {
            let ck = match &args.checkpoint {
                Some(p) if p.exists() => p.clone(),
                Some(p) => return Err(Error::Dependency(format!("{} is missing", p.display())).into()),
                None => latest_state(ctx)?,
            };
            ctx.manifest("eval", &dir, None, &[dataset.clone(), ck.clone()])?;
            let (state, _) = TrainState::load(&ck)?;
            (format!("stage{}", state.stage), evaluate(&state.model, &labeled, &names, &protocol)?)
        }
        Predictor::Teacher => {
            ctx.manifest("eval", &dir, None, &[dataset.clone(), ctx.teacher_dir()])?;
            let b = ctx.load_bundle()?;
            let zs = ZeroShotPredictor {
                teacher: &b.teacher,
                prototypes: &b.prototypes,
            };
            ("teacher".into(), evaluate(&zs, &labeled, &names, &protocol)?)
        }
        Predictor::Oracle => {
            ctx.manifest("eval", &dir, None, std::slice::from_ref(&dataset))?;
            let k = names.len();
            let oracle = move |c: &unite::VideoClip| -> unite::Result<Vec<f32>> {
                let y = c.label().ok_or_else(|| Error::Data("oracle needs labeled clips".into()))?;
                Ok((0..k).map(|i| if i == y { 1.0 } else { 0.0 }).collect())
            };
            ("oracle".into(), evaluate(&oracle, &labeled, &names, &protocol)?)
        }
    };
    write_atomic(&dir.join(format!("{name}.csv")), report.to_csv().as_bytes())?;
    write_atomic(&dir.join(format!("{name}.json")), report.to_json().as_bytes())?;
    println!("{:.1}", report.top1);
    Ok(())
}

fn sweep(ctx: &Ctx, args: &SweepArgs) -> Result<()> {
    let ws = ctx.workspace()?;
    let dir = ctx.out("sweep")?;
    ctx.manifest("sweep", &dir, Some(&ctx.cfg.stage3), &[ctx.data_dir(), ctx.teacher_dir(), ctx.stage_state(2)])?;
    let base = ctx.load_state(2)?.model;
    let mut csv = String::from("param,value,top1,coverage,precision\n");
    for v in &args.values {
        let mut cfg = ctx.cfg.stage3.clone();
        args.param.apply(&mut cfg, v)?;
        let state = ws.stage3(base.clone(), &cfg)?;
        let top1 = ws.evaluate(&state.model)?.top1;
        let (cov, prec) = match ws.pseudolabel_stats(&state.audit)? {
            Some(s) => (s.coverage_text(), s.precision_text()),
            None => ("N/A".into(), "N/A".into()),
        };
        let row = format!("{},{},{top1:.4},{cov},{prec}\n", args.param.name(), v);
        print!("{row}");
        csv.push_str(&row);
    }
    write_atomic(&dir.join(format!("{}.csv", args.param.name())), csv.as_bytes())?;
    Ok(())
}

fn ablate(ctx: &Ctx, args: &AblateArgs) -> Result<()> {
    let dir = ctx.out("ablation")?;
    ctx.manifest("ablate", &dir, None, &[])?;
    let mut csv = format!("{}\n", AblationResult::CSV_HEADER);
    println!("{}", AblationResult::CSV_HEADER);
    for &seed in &args.seeds {
        // Seed-derived fields follow the new seed unless the config set them.
        let text = match &ctx.global.config {
            Some(p) => fs::read_to_string(p)?,
            None => "{}".into(),
        };
        let cfg = ExperimentConfig::resolve(Some(&text), Some(seed))?;
        let r = run_ablations(cfg)?;
        println!("{}", r.csv_row());
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_atomic(&dir.join("ablation.csv"), csv.as_bytes())?;
    Ok(())
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn report(ctx: &Ctx) -> Result<()> {
    let out = &ctx.global.out;
    let mut md = String::from("# Run report\n");
    let ablation = out.join("ablation").join("ablation.csv");
    if ablation.exists() {
        let rows = read_csv(&ablation)?;
        let cols = AblationResult::CSV_HEADER.split(',').collect::<Vec<_>>();
        md.push_str("\n## Ablations (median target top-1 over seeds)\n\n| arm | median | seeds |\n|---|---|---|\n");
        for (j, col) in cols.iter().enumerate().skip(1) {
            let vals: Vec<f64> = rows.iter().map(|r| r[j].parse::<f64>()).collect::<Result<_, _>>()?;
            let m = median(&vals).unwrap_or(f64::NAN);
            md.push_str(&format!("| {col} | {m:.1} | {} |\n", vals.len()));
        }
    }
    let sweep_dir = out.join("sweep");
    if sweep_dir.exists() {
        let mut files: Vec<PathBuf> = fs::read_dir(&sweep_dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        files.retain(|f| f.extension().is_some_and(|e| e == "csv"));
        files.sort();
        for f in files {
            let rows = read_csv(&f)?;
            let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            md.push_str(&format!("\n## Sweep over {name}\n\n| value | top-1 | coverage | precision |\n|---|---|---|---|\n"));
            for r in rows {
                md.push_str(&format!("| {} | {} | {} | {} |\n", r[1], r[2], r[3], r[4]));
            }
        }
    }
    let eval_dir = out.join("eval");
    if eval_dir.exists() {
        let mut files: Vec<PathBuf> = fs::read_dir(&eval_dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        files.retain(|f| f.extension().is_some_and(|e| e == "json"));
        files.sort();
        if !files.is_empty() {
            md.push_str("\n## Evaluations\n\n| predictor | top-1 |\n|---|---|\n");
        }
        for f in files {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&f)?)?;
            let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            md.push_str(&format!("| {name} | {:.1} |\n", v["top1"].as_f64().unwrap_or(f64::NAN)));
        }
    }
    if md.lines().count() == 1 {
        return Err(Error::Dependency(format!("no persisted results under {}", out.display())).into());
    }
    fs::create_dir_all(out)?;
    write_atomic(&out.join("report.md"), md.as_bytes())?;
    print!("{md}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.global.threads == 0 {
        bail!(Error::Config("threads: must be at least 1".into()));
    }
    let threads = if cli.global.deterministic { 1 } else { cli.global.threads };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("starting the worker pool")?;
    let ctx = Ctx::new(cli.global)?;
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainTeacher => train_teacher(&ctx),
        Command::Pretrain(a) => pretrain(&ctx, a),
        Command::Finetune(a) => finetune(&ctx, a),
        Command::Selftrain(a) => selftrain(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Report => report(&ctx),
    }
}

/// Exit code per error category.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Spec(_)) => 2,
        Some(Error::Dependency(_)) => 3,
        Some(Error::Data(_) | Error::Format(_) | Error::UnsupportedVersion { .. }) => 4,
        Some(Error::StageOrder(_)) => 5,
        Some(Error::Io(_)) => 6,
        Some(_) => 1,
        None if err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some()) => 6,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
