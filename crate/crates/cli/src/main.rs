use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use segkit::dataset::{dataset_stats, load_manifest, save_manifest, synth_generate, ClassTable, SynthConfig};
use segkit::features::{FeatureStore, ToyEncoder};
use segkit::fsutil;
use segkit::grid::{assign_dataset, load_assignments, save_assignments};
use segkit::head::{train, ToyHead, TrainConfig};
use segkit::losses::gradcheck_suite;
use segkit::metrics::{render_report, report_json, AccuracyDef, EvalReport};
use segkit::pipeline::{
    everything_mode, prepare_manifest, refilter, run_everything_mode, write_eval, write_run_manifest,
    FeatureSource, RunConfig,
};
use segkit::postprocess::FilterConfig;

/// Exit code for a run that completed but missed a configured threshold.
const EXIT_THRESHOLD: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "segkit", version, about = "Everything-mode point-prompt segmentation toolkit")]
struct Cli {
    /// Worker threads for per-image parallelism [default: available cores]
    #[arg(long, global = true, env = "SEGKIT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic shapes dataset
    Synth(SynthArgs),
    /// Print per-class, per-category and per-size mask counts
    Stats(StatsArgs),
    /// Assign every ground-truth mask to its nearest grid point
    Assign(AssignArgs),
    /// Fine-tune the toy head on point-to-mask pairs
    Train(TrainArgs),
    /// Run everything mode and write survivors, counts and the report
    Predict(PredictArgs),
    /// Re-run post-processing on saved survivors
    Filter(FilterCmdArgs),
    /// Evaluate a checkpoint, optionally against a baseline and thresholds
    Eval(EvalArgs),
    /// Check analytic loss gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Render a saved evaluation report
    Report(ReportArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: u32,
    #[arg(long, default_value_t = 64)]
    height: u32,
    /// Number of toy classes (at most 8)
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    shapes_min: usize,
    #[arg(long, default_value_t = 5)]
    shapes_max: usize,
    #[arg(long, default_value = "img")]
    id_prefix: String,
}

#[derive(Args, Debug, Serialize)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Print JSON instead of the table
    #[arg(long)]
    json: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum FeatureKind {
    Toy,
    Dir,
}

#[derive(Args, Debug, Serialize)]
struct FeatureArgs {
    /// Feature source: the built-in toy encoder or a directory of .feat files
    #[arg(long = "features", value_enum, default_value_t = FeatureKind::Toy)]
    kind: FeatureKind,
    /// Directory holding <image_id>.feat files (with --features dir)
    #[arg(long)]
    feature_dir: Option<PathBuf>,
    /// Toy encoder cell size in pixels
    #[arg(long, default_value_t = 1)]
    toy_stride: u32,
}

impl FeatureArgs {
    fn source(&self) -> Result<FeatureSource> {
        Ok(match self.kind {
            FeatureKind::Toy => {
                if self.toy_stride == 0 {
                    bail!("--toy-stride must be >= 1");
                }
                FeatureSource::Toy { stride: self.toy_stride }
            }
            FeatureKind::Dir => FeatureSource::Dir {
                path: self
                    .feature_dir
                    .clone()
                    .context("--features dir requires --feature-dir")?,
            },
        })
    }
}

#[derive(Args, Debug, Serialize)]
struct InputArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    features: FeatureArgs,
    /// Points per side of the prompt grid
    #[arg(long, default_value_t = 32)]
    grid: u32,
    /// Upsample images and masks to a square canvas of this side first
    #[arg(long)]
    canvas: Option<u32>,
}

#[derive(Args, Debug, Serialize)]
struct FilterArgs {
    /// Keep candidates whose predicted IoU is at least this
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    pred_iou: f64,
    /// Suppress boxes overlapping a kept box at this IoU or more
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    box_cutoff: f64,
    /// Remove islands and fill holes smaller than this many pixels
    #[arg(long, default_value_t = 150)]
    min_area: usize,
}

impl FilterArgs {
    fn config(&self) -> Result<FilterConfig> {
        if !(0.0..=1.0).contains(&self.pred_iou) {
            bail!("--pred-iou must lie in [0, 1], got {}", self.pred_iou);
        }
        if self.box_cutoff.is_nan() || self.box_cutoff < 0.0 {
            bail!("--box-cutoff must be >= 0, got {}", self.box_cutoff);
        }
        Ok(FilterConfig {
            pred_iou_threshold: self.pred_iou,
            box_iou_cutoff: self.box_cutoff,
            min_region_area: self.min_area,
        })
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum AccuracyArg {
    ForegroundRecall,
    PixelAccuracy,
}

impl From<AccuracyArg> for AccuracyDef {
    fn from(a: AccuracyArg) -> Self {
        match a {
            AccuracyArg::ForegroundRecall => AccuracyDef::ForegroundRecall,
            AccuracyArg::PixelAccuracy => AccuracyDef::PixelAccuracy,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct AssignArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    out: PathBuf,
    /// Precomputed assignments; computed from the manifest when absent
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Start from this checkpoint instead of a random head
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3, allow_negative_numbers = true)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay, allow_negative_numbers = true)]
    weight_decay: f64,
    /// Seeds both the head initialisation and the pair shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, value_enum, default_value_t = AccuracyArg::ForegroundRecall)]
    accuracy: AccuracyArg,
}

#[derive(Args, Debug, Serialize)]
struct FilterCmdArgs {
    /// A predict output directory (its survivors/ subdirectory is read)
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Compare against this checkpoint
    #[arg(long, conflicts_with = "baseline_seed")]
    baseline_checkpoint: Option<PathBuf>,
    /// Compare against a random head drawn with this seed
    #[arg(long)]
    baseline_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, value_enum, default_value_t = AccuracyArg::ForegroundRecall)]
    accuracy: AccuracyArg,
    /// Fail (exit 3) if mean IoU is below this fraction
    #[arg(long, allow_negative_numbers = true)]
    min_miou: Option<f64>,
    /// Fail (exit 3) if mean classification accuracy is below this fraction
    #[arg(long, allow_negative_numbers = true)]
    min_cls_acc: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// An eval.json written by predict or eval
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'static str,
    threads: usize,
    #[serde(flatten)]
    command: &'a Command,
}

fn record(out: &Path, cli: &Cli) -> Result<()> {
    let m = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        threads: rayon::current_num_threads(),
        command: &cli.command,
    };
    write_run_manifest(out, &m)?;
    Ok(())
}

fn check_paths(paths: &[(&str, &Path)]) -> Result<()> {
    for (flag, p) in paths {
        if !p.exists() {
            bail!("{flag}: {} does not exist", p.display());
        }
    }
    Ok(())
}

fn check_grid(grid: u32) -> Result<()> {
    if grid == 0 {
        bail!("--grid must be >= 1");
    }
    Ok(())
}

fn random_head(table: &ClassTable, seed: u64) -> ToyHead {
    ToyHead::random(ToyEncoder::CHANNELS, table.len(), seed)
}

fn cmd_synth(a: &SynthArgs, cli: &Cli) -> Result<u8> {
    let cfg = SynthConfig {
        images: a.images,
        width: a.width,
        height: a.height,
        class_table: ClassTable::toy(a.classes).context("--classes")?,
        shapes_min: a.shapes_min,
        shapes_max: a.shapes_max,
        seed: a.seed,
        id_prefix: a.id_prefix.clone(),
        ..SynthConfig::default()
    };
    let m = synth_generate(&cfg)?;
    save_manifest(&m, &a.out.join("manifest.json"))?;
    record(&a.out, cli)?;
    println!(
        "wrote {} images, {} masks to {}",
        m.image_count(),
        m.mask_count(),
        a.out.join("manifest.json").display()
    );
    Ok(0)
}

fn cmd_stats(a: &StatsArgs) -> Result<u8> {
    check_paths(&[("--manifest", &a.manifest)])?;
    let stats = dataset_stats(&load_manifest(&a.manifest)?);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        print!("{}", stats.render_text());
    }
    Ok(0)
}

fn cmd_assign(a: &AssignArgs, cli: &Cli) -> Result<u8> {
    check_paths(&[("--manifest", &a.input.manifest)])?;
    check_grid(a.input.grid)?;
    let source = a.input.features.source()?;
    let m = prepare_manifest(&a.input.manifest, a.input.canvas)?;
    source.check(&m)?;
    let assignments = assign_dataset(&m, source.provider()?.as_ref(), a.input.grid)?;
    save_assignments(&assignments, &a.out.join("assignments.json"))?;
    record(&a.out, cli)?;
    println!("assigned {} instances", assignments.len());
    Ok(0)
}

fn cmd_train(a: &TrainArgs, cli: &Cli) -> Result<u8> {
    check_paths(&[("--manifest", &a.input.manifest)])?;
    if let Some(p) = &a.assignments {
        check_paths(&[("--assignments", p)])?;
    }
    if let Some(p) = &a.init {
        check_paths(&[("--init", p)])?;
    }
    check_grid(a.input.grid)?;
    if !a.lr.is_finite() || a.lr < 0.0 {
        bail!("--lr must be a finite value >= 0, got {}", a.lr);
    }
    if a.epochs == 0 {
        bail!("--epochs must be >= 1");
    }
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        weight_decay: a.weight_decay,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;

    let source = a.input.features.source()?;
    let m = prepare_manifest(&a.input.manifest, a.input.canvas)?;
    source.check(&m)?;
    let store = FeatureStore::precompute(&m, source.provider()?.as_ref())?;
    let assignments = match &a.assignments {
        Some(p) => load_assignments(p)?,
        None => assign_dataset(&m, &store, a.input.grid)?,
    };
    let init = match &a.init {
        Some(p) => ToyHead::load(p)?,
        None => random_head(&m.class_table, a.seed),
    };
    let (head, log) = train(&init, &m, &assignments, &store, &cfg)?;
    head.save(&a.out.join("head.ckpt"))?;
    log.write_csv(&a.out.join("train_log.csv"))?;
    save_assignments(&assignments, &a.out.join("assignments.json"))?;
    record(&a.out, cli)?;
    if let (Some(f), Some(l)) = (log.first(), log.last()) {
        println!(
            "trained {} epochs on {} pairs: loss {:.4} -> {:.4}",
            log.epochs.len(),
            assignments.len(),
            f.mean_total,
            l.mean_total
        );
    }
    Ok(0)
}

fn cmd_predict(a: &PredictArgs, cli: &Cli) -> Result<u8> {
    check_paths(&[("--manifest", &a.input.manifest), ("--checkpoint", &a.checkpoint)])?;
    check_grid(a.input.grid)?;
    let cfg = RunConfig {
        manifest: a.input.manifest.clone(),
        features: a.input.features.source()?,
        checkpoint: a.checkpoint.clone(),
        out_dir: a.out.clone(),
        grid_per_side: a.input.grid,
        filter: a.filter.config()?,
        train: TrainConfig::default(),
        seed: 0,
        canvas: a.input.canvas,
        accuracy: a.accuracy.into(),
    };
    let out = run_everything_mode(&cfg)?;
    record(&a.out, cli)?;
    print!("{}", out.counts.render_text());
    println!();
    print!("{}", render_report(&out.report, None));
    Ok(0)
}

fn cmd_filter(a: &FilterCmdArgs, cli: &Cli) -> Result<u8> {
    let survivors = a.input.join("survivors");
    check_paths(&[("--in", &survivors)])?;
    let counts = refilter(&survivors, &a.out, &a.filter.config()?)?;
    record(&a.out, cli)?;
    print!("{}", counts.render_text());
    Ok(0)
}

fn cmd_eval(a: &EvalArgs, cli: &Cli) -> Result<u8> {
    check_paths(&[("--manifest", &a.input.manifest), ("--checkpoint", &a.checkpoint)])?;
    if let Some(p) = &a.baseline_checkpoint {
        check_paths(&[("--baseline-checkpoint", p)])?;
    }
    check_grid(a.input.grid)?;
    for (flag, v) in [("--min-miou", a.min_miou), ("--min-cls-acc", a.min_cls_acc)] {
        if let Some(v) = v {
            if !(0.0..=1.0).contains(&v) {
                bail!("{flag} must lie in [0, 1], got {v}");
            }
        }
    }
    let filter = a.filter.config()?;
    let source = a.input.features.source()?;
    let m = prepare_manifest(&a.input.manifest, a.input.canvas)?;
    source.check(&m)?;
    let provider = source.provider()?;
    let run = |head: &ToyHead| -> Result<EvalReport> {
        Ok(everything_mode(head, &m, provider.as_ref(), a.input.grid, &filter, a.accuracy.into())?.report)
    };
    let report = run(&ToyHead::load(&a.checkpoint)?)?;
    let baseline = match (&a.baseline_checkpoint, a.baseline_seed) {
        (Some(p), _) => Some(run(&ToyHead::load(p)?)?),
        (None, Some(s)) => Some(run(&random_head(&m.class_table, s))?),
        (None, None) => None,
    };
    write_eval(&a.out, &report, baseline.as_ref())?;
    record(&a.out, cli)?;
    print!("{}", render_report(&report, baseline.as_ref()));

    let mut ok = true;
    if let Some(t) = a.min_miou {
        if report.miou < t {
            eprintln!("mean IoU {:.4} is below --min-miou {t}", report.miou);
            ok = false;
        }
    }
    if let Some(t) = a.min_cls_acc {
        if report.mean_cls_acc < t {
            eprintln!("classification accuracy {:.4} is below --min-cls-acc {t}", report.mean_cls_acc);
            ok = false;
        }
    }
    Ok(if ok { 0 } else { EXIT_THRESHOLD })
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<u8> {
    if a.trials == 0 {
        bail!("--trials must be >= 1");
    }
    let s = gradcheck_suite(a.seed, a.trials)?;
    let verdict = |v: f64| if v < a.tolerance { "ok" } else { "FAIL" };
    println!("{:<14} {:>12}", "loss", "max rel err");
    for (name, v) in [("dice", s.dice), ("focal", s.focal), ("cross-entropy", s.cross_entropy)] {
        println!("{name:<14} {v:>12.3e} {}", verdict(v));
    }
    Ok(if s.worst() < a.tolerance { 0 } else { EXIT_THRESHOLD })
}

fn cmd_report(a: &ReportArgs) -> Result<u8> {
    check_paths(&[("--eval", &a.eval)])?;
    let report: EvalReport = fsutil::read_json(&a.eval)?;
    let baseline: Option<EvalReport> = match &a.baseline {
        Some(p) => {
            check_paths(&[("--baseline", p)])?;
            Some(fsutil::read_json(p)?)
        }
        None => None,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report_json(&report, baseline.as_ref()))?);
    } else {
        print!("{}", render_report(&report, baseline.as_ref()));
    }
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli),
        Command::Stats(a) => cmd_stats(a),
        Command::Assign(a) => cmd_assign(a, cli),
        Command::Train(a) => cmd_train(a, cli),
        Command::Predict(a) => cmd_predict(a, cli),
        Command::Filter(a) => cmd_filter(a, cli),
        Command::Eval(a) => cmd_eval(a, cli),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
