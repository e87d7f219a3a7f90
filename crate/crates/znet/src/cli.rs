//! The `znet` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or IO error, 3 numeric
//! failure (non-finite loss, failed gradient check).

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use znet_core::autograd::{compile, init_params, ParamStore};
use znet_core::data::{plan_patches, split_folds, Dtype, PatchPolicy, Phase, Volume, VolumeKind};
use znet_core::gradcheck::{run_suite, SuiteOptions};
use znet_core::metrics::{binarize, ConfusionCounts};
use znet_core::models::{summarize, ArchConfig, ARCH_NAMES};
use znet_core::phantom::{generate, PhantomSpec};
use znet_core::train::{fit, predict_volume, Augment, Sample, Stopwatch, Trainer, VolumeScore, SWEEP_RATES};
use znet_core::{Shape5, Tensor};

use crate::checkpoint;
use crate::config::{PolicySection, RunConfigFile};
use crate::dataset::{image_header, label_header, load_samples, read_image, Entry, Manifest};
use crate::logs;
use crate::workers::par_map;
use crate::zvol::{self, HEADER_SUFFIX};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// A bad combination of flags that clap cannot see.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A numeric failure reported by a command rather than raised by the engine.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Exit code for an error, from the first recognised cause in its chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<NumericFailure>() {
            return EXIT_NUMERIC;
        }
        if let Some(znet_core::Error::NonFinite(_)) = cause.downcast_ref::<znet_core::Error>() {
            return EXIT_NUMERIC;
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(name = "znet", version, about = "Anisotropic separable 3D segmentation networks on the CPU")]
pub struct Cli {
    /// Worker threads for volume IO, phantom generation and prediction.
    /// Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=256))]
    pub threads: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic tube or blob phantoms with a manifest.
    Phantom(PhantomArgs),
    /// Train on a phantom directory.
    Train(TrainArgs),
    /// Segment volumes with a checkpoint.
    Predict(PredictArgs),
    /// Score a checkpoint against labelled volumes.
    Eval(EvalArgs),
    /// Print the per-layer parameter table; the last line is `total N`.
    Params(ParamsArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Generator settings as JSON; defaults apply to missing fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the first phantom; later ones use seed + index. Overrides the spec file.
    #[arg(long, env = "ZNET_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AugmentArg {
    None,
    AllRotations,
    RandomRotation,
}

impl From<AugmentArg> for Augment {
    fn from(a: AugmentArg) -> Self {
        match a {
            AugmentArg::None => Augment::None,
            AugmentArg::AllRotations => Augment::AllRotations,
            AugmentArg::RandomRotation => Augment::RandomRotation,
        }
    }
}

fn parse_policy(s: &str) -> Result<String, String> {
    PatchPolicy::by_name(s).map(|_| s.to_string()).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct ArchArgs {
    #[arg(long, value_parser = ARCH_NAMES)]
    pub arch: Option<String>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration JSON. Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
    /// patch512, patch128, patch64 or cube<N>.
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub augment: Option<AugmentArg>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, env = "ZNET_SEED")]
    pub seed: Option<u64>,
    /// Train once per initial rate in {0.1, 0.05, 0.01, 0.005} and keep the best by validation IoU.
    #[arg(long, conflicts_with = "lr")]
    pub lr_sweep: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value = "patch512", value_parser = parse_policy)]
    pub policy: String,
    /// Image volume headers (`*.zvol.json`).
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the foreground probability as an f32 volume.
    #[arg(long)]
    pub probabilities: bool,
    /// Use image intensities as stored instead of dividing by the maximum.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value = "patch512", value_parser = parse_policy)]
    pub policy: String,
    /// Directory holding manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated volume ids; all manifest volumes by default.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    /// Where to write the per-volume metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Input extent `HxWxD`.
    #[arg(long, default_value = "64x64x8", value_parser = parse_extent)]
    pub input: [usize; 3],
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds to run, comma separated.
    #[arg(long, env = "ZNET_SEED", value_delimiter = ',', default_value = "0,1,2")]
    pub seed: Vec<u64>,
    /// Entries checked per operator buffer; every entry by default.
    #[arg(long)]
    pub max_entries: Option<usize>,
    /// Perturb convolution weight gradients so that the suite must fail.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

fn parse_extent(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    let bad = || format!("expected HxWxD with positive integers, got {s:?}");
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().ok().filter(|&v| v > 0).ok_or_else(bad)?;
    }
    Ok(out)
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let threads = cli.threads as usize;
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a, threads),
        Command::Train(a) => cmd_train(a, threads),
        Command::Predict(a) => cmd_predict(a, threads),
        Command::Eval(a) => cmd_eval(a, threads),
        Command::Params(a) => cmd_params(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_phantom(a: PhantomArgs, threads: usize) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<PhantomSpec>(&text).with_context(|| format!("parsing phantom spec {}", p.display()))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    if a.count == 0 {
        bail!(UsageError("--count must be at least 1".into()));
    }
    create_dir(&a.out)?;
    let ids: Vec<(usize, String)> = (0..a.count).map(|i| (i, format!("phantom_{i:03}"))).collect();
    let entries = par_map(threads, &ids, |(i, id)| {
        let (image, label) = generate(&spec.with_seed(spec.seed.wrapping_add(*i as u64)), id)?;
        let (ih, lh) = (image_header(&a.out, id), label_header(&a.out, id));
        zvol::write_volume(&image, &ih)?;
        zvol::write_volume(&label, &lh)?;
        let name = |p: &Path| p.file_name().expect("file name").to_string_lossy().into_owned();
        Ok(Entry { id: id.clone(), image: name(&ih), label: name(&lh) })
    })?;
    Manifest { spec: Some(spec), volumes: entries }.save(&a.out)?;
    println!("wrote {} phantoms to {}", a.count, a.out.display());
    Ok(())
}

struct WallClock(Instant);

impl Stopwatch for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn apply_arch(section: &mut crate::config::ArchSection, a: &ArchArgs) {
    if let Some(n) = &a.arch {
        section.name = n.clone();
    }
    if let Some(l) = a.levels {
        section.levels = l;
    }
    if let Some(b) = a.base_channels {
        section.base_channels = b;
    }
}

fn resolve_arch(a: &ArchArgs) -> Result<ArchConfig> {
    let mut section = crate::config::ArchSection::default();
    apply_arch(&mut section, a);
    section.resolve().map_err(|e| UsageError(format!("{e:#}")).into())
}

/// The configuration after merging the file with command-line overrides.
pub fn merged_config(a: &TrainArgs) -> Result<RunConfigFile> {
    let mut c = match &a.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    apply_arch(&mut c.arch, &a.arch);
    if let Some(p) = &a.policy {
        c.policy = PolicySection::Named(p.clone());
    }
    if let Some(v) = a.lr {
        c.train.initial_lr = v;
    }
    if let Some(v) = a.momentum {
        c.train.momentum = v;
    }
    if let Some(v) = a.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = a.augment {
        c.train.augment = v.into();
    }
    if let Some(v) = a.fold {
        c.data.fold = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    Ok(c)
}

#[derive(Serialize)]
struct BestRecord<'a> {
    epoch: usize,
    val_iou: f64,
    checkpoint: &'a str,
    arch: &'a str,
    levels: usize,
    base_channels: usize,
    policy: &'a str,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config: &'a RunConfigFile,
    train_ids: &'a [String],
    val_ids: &'a [String],
    test_ids: &'a [String],
    best_epoch: Option<usize>,
    best_val_iou: Option<f64>,
    test_iou: Option<f64>,
}

struct RunSummary {
    best_val_iou: f64,
    test_iou: Option<f64>,
}

struct Split<'a> {
    train: &'a [Sample],
    val: &'a [Sample],
    test: &'a [Sample],
    ids: [&'a [String]; 3],
}

fn train_once(cfg: &RunConfigFile, split: &Split<'_>, out: &Path, threads: usize) -> Result<RunSummary> {
    create_dir(out)?;
    let arch = cfg.arch.resolve()?;
    let policy = cfg.policy.resolve()?;
    let tc = cfg.train_config();
    let clock = WallClock(Instant::now());
    let outcome = fit(arch, policy.clone(), tc, split.train, split.val, &[], &clock, |t: &Trainer, rec| {
        println!("epoch {} mean_loss {:.6} val_iou {:.6}", rec.epoch, rec.mean_loss, rec.val_iou);
        checkpoint::save(&t.params, &out.join(format!("epoch_{}.znet", rec.epoch)))
            .map_err(|e| znet_core::Error::InvalidData(format!("{e:#}")))
    })?;
    let t = &outcome.trainer;
    checkpoint::save(t.selected(), &out.join("best.znet"))?;
    let (best_epoch, best_val) = t.best.as_ref().map(|b| (b.0, b.1)).unwrap_or((0, f64::NAN));
    let policy_name = policy.name.clone();
    write_json(
        &out.join("best.json"),
        &BestRecord {
            epoch: best_epoch,
            val_iou: best_val,
            checkpoint: "best.znet",
            arch: arch.name(),
            levels: arch.levels,
            base_channels: arch.base_channels,
            policy: &policy_name,
        },
    )?;
    logs::write_run_log(out, &t.log)?;
    let test_iou = if split.test.is_empty() {
        None
    } else {
        let scores = score_volumes(&t.spec, t.selected(), split.test, &policy, threads)?;
        logs::write_metrics(&out.join("metrics.csv"), &scores)?;
        Some(mean_iou(&scores))
    };
    write_json(
        &out.join("run.json"),
        &RunRecord {
            config: cfg,
            train_ids: split.ids[0],
            val_ids: split.ids[1],
            test_ids: split.ids[2],
            best_epoch: t.best.as_ref().map(|b| b.0),
            best_val_iou: t.best.as_ref().map(|b| b.1),
            test_iou,
        },
    )?;
    if let Some(v) = test_iou {
        println!("test_iou {v:.6}");
    }
    Ok(RunSummary { best_val_iou: best_val, test_iou })
}

pub fn cmd_train(a: TrainArgs, threads: usize) -> Result<()> {
    let cfg = merged_config(&a)?;
    cfg.arch.resolve().map_err(|e| UsageError(format!("{e:#}")))?;
    cfg.policy.resolve().map_err(|e| UsageError(format!("{e:#}")))?;
    cfg.train_config().validate().map_err(|e| UsageError(e.to_string()))?;

    let manifest = Manifest::load(&a.data)?;
    let folds = split_folds(&manifest.ids(), cfg.seed, cfg.data.split)?;
    let fold = folds.get(cfg.data.fold).ok_or_else(|| {
        UsageError(format!("fold {} does not exist; the split has {} folds", cfg.data.fold, folds.len()))
    })?;
    let order: Vec<String> = fold.train.iter().chain(&fold.val).chain(&fold.test).cloned().collect();
    let samples = load_samples(&a.data, Some(&order), cfg.data.normalize, threads)?;
    let (nt, nv) = (fold.train.len(), fold.val.len());
    let split = Split {
        train: &samples[..nt],
        val: &samples[nt..nt + nv],
        test: &samples[nt + nv..],
        ids: [&fold.train, &fold.val, &fold.test],
    };

    if !a.lr_sweep {
        train_once(&cfg, &split, &a.out, threads)?;
        return Ok(());
    }
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for lr in SWEEP_RATES {
        println!("learning rate {lr}");
        let mut c = cfg.clone();
        c.train.initial_lr = lr;
        let s = train_once(&c, &split, &a.out.join(format!("lr_{lr}")), threads)?;
        if best.is_none_or(|(_, b)| s.best_val_iou > b) {
            best = Some((lr, s.best_val_iou));
        }
        rows.push((lr, s));
    }
    let mut w = csv::Writer::from_path(a.out.join("sweep.csv"))?;
    w.write_record(["initial_lr", "best_val_iou", "test_iou"])?;
    for (lr, s) in &rows {
        let test = s.test_iou.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([lr.to_string(), s.best_val_iou.to_string(), test])?;
    }
    w.flush()?;
    let (lr, v) = best.expect("four rates were run");
    println!("best_lr {lr} val_iou {v:.6}");
    Ok(())
}

fn score_volumes(
    spec: &[znet_core::autograd::LayerSpec],
    params: &ParamStore,
    samples: &[Sample],
    policy: &PatchPolicy,
    threads: usize,
) -> Result<Vec<VolumeScore>> {
    par_map(threads, samples, |s| {
        let probs = predict_volume(spec, params, &s.image, policy)?;
        let counts = ConfusionCounts::from_labels(&s.label.data, &binarize(&probs)?)?;
        Ok(VolumeScore { id: s.image.meta.source.clone(), iou: counts.iou(), counts })
    })
}

fn mean_iou(scores: &[VolumeScore]) -> f64 {
    scores.iter().map(|s| s.iou).sum::<f64>() / scores.len() as f64
}

/// Parameters for `arch` sized for `image` under `policy`, filled from a checkpoint.
fn load_model(
    arch: &ArchConfig,
    policy: &PatchPolicy,
    image: &Volume,
    path: &Path,
) -> Result<(Vec<znet_core::autograd::LayerSpec>, ParamStore)> {
    let spec = arch.build()?;
    let plan = plan_patches(&image.meta, policy, Phase::Eval)?;
    let g = compile(&spec, plan.patch_shape(1)?)?;
    let mut params = init_params(&g, 0)?;
    checkpoint::load(&mut params, path)?;
    Ok((spec, params))
}

fn output_header(out: &Path, input: &Path, suffix: &str) -> Result<PathBuf> {
    let name = input.file_name().and_then(|n| n.to_str()).context("input path has no UTF-8 file name")?;
    let stem = name.strip_suffix(HEADER_SUFFIX).unwrap_or(name);
    Ok(out.join(format!("{stem}_{suffix}{HEADER_SUFFIX}")))
}

pub fn cmd_predict(a: PredictArgs, threads: usize) -> Result<()> {
    let arch = resolve_arch(&a.arch)?;
    let policy = PatchPolicy::by_name(&a.policy)?;
    let images = par_map(threads, &a.input, |p| read_image(p, !a.no_normalize))?;
    if let Some(v) = images.iter().find(|v| v.meta.kind != VolumeKind::Image) {
        bail!("{} is a label volume, not an image", v.meta.source);
    }
    let (spec, params) = load_model(&arch, &policy, &images[0], &a.checkpoint)?;
    create_dir(&a.out)?;
    let jobs: Vec<(&PathBuf, &Volume)> = a.input.iter().zip(&images).collect();
    par_map(threads, &jobs, |(path, image)| {
        let probs = predict_volume(&spec, &params, image, &policy)?;
        let labels = binarize(&probs)?;
        let mut meta = image.meta.clone();
        meta.kind = VolumeKind::Label;
        meta.dtype = Dtype::U8;
        let header = output_header(&a.out, path, "pred")?;
        zvol::write_volume(&Volume::new(meta, labels)?, &header)?;
        if a.probabilities {
            let s = probs.shape();
            let fg: Vec<f64> = probs.as_slice().chunks_exact(2).map(|p| p[1]).collect();
            let fg = Tensor::from_vec(Shape5::new(s.n, s.h, s.w, s.d, 1)?, fg)?;
            let header = output_header(&a.out, path, "prob")?;
            zvol::write_volume(&Volume::new(image.meta.clone(), fg)?, &header)?;
        }
        println!("{} -> {}", path.display(), header.display());
        Ok(())
    })?;
    Ok(())
}

pub fn cmd_eval(a: EvalArgs, threads: usize) -> Result<()> {
    let arch = resolve_arch(&a.arch)?;
    let policy = PatchPolicy::by_name(&a.policy)?;
    let ids = if a.ids.is_empty() { None } else { Some(a.ids.as_slice()) };
    let samples = load_samples(&a.data, ids, !a.no_normalize, threads)?;
    let (spec, params) = load_model(&arch, &policy, &samples[0].image, &a.checkpoint)?;
    let scores = score_volumes(&spec, &params, &samples, &policy, threads)?;
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        logs::write_metrics(out, &scores)?;
    }
    let mut stdout = std::io::stdout().lock();
    for s in &scores {
        writeln!(stdout, "{} {:.6}", s.id, s.iou)?;
    }
    writeln!(stdout, "mean_iou {:.6}", mean_iou(&scores))?;
    Ok(())
}

pub fn cmd_params(a: ParamsArgs) -> Result<()> {
    let arch = resolve_arch(&a.arch)?;
    let [h, w, d] = a.input;
    let g = arch.granularity();
    if h % g != 0 || w % g != 0 || d % g != 0 {
        bail!(UsageError(format!("every input extent must be a multiple of {g} for {} levels", arch.levels)));
    }
    let spec = arch.build()?;
    let shape = Shape5::new(1, h, w, d, arch.in_channels)?;
    let table = summarize(&spec, shape)?;
    print!("{}", table.trim_end());
    println!();
    Ok(())
}

pub fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let opts = SuiteOptions { corrupt_conv_grad: a.corrupt, max_entries: a.max_entries, ..SuiteOptions::default() };
    let mut failed = 0usize;
    let mut total = 0usize;
    println!("seed,check,entries,max_rel_error,tolerance,result");
    for seed in a.seed {
        for r in run_suite(seed, opts)? {
            total += 1;
            if !r.passed {
                failed += 1;
            }
            println!(
                "{},{},{},{:.3e},{:.0e},{}",
                r.seed,
                r.name,
                r.checked,
                r.max_rel_error,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
    }
    if failed > 0 {
        bail!(NumericFailure(format!("{failed} of {total} gradient checks failed")));
    }
    println!("all {total} gradient checks passed");
    Ok(())
}
