//! Command-line driver. Every subcommand reads files, writes files and a
//! report, and exits with 0 (ok), 1 (usage), 2 (validation) or 3 (numeric).

mod error;
mod output;
mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::analyze::{self, cost_report, factor_histogram, CostReport};
use crate::graph::{build_with, Arch, BuildOptions, Mode, ModelGraph, ShortcutKind};
use crate::surgery::{self, prune, prune_to_rate, PruneReport};
use crate::tensor::Tensor;
use crate::train::{self, make_toy_dataset, ToyDataset, TrainConfig, TrainMode};

pub use error::{CliError, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};
use output::{json_bytes, load_model, model_files, publish_dir, write_files, OutputLock};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "RESFUSE_THREADS";

/// Default FLOPs reduction (percent) below which `run-pipeline` skips retraining.
pub const DEFAULT_RETRAIN_CUTOFF: f64 = 30.0;

const CUTOFF_NOTE: &str = "operational default, not part of the pruning method";

#[derive(Debug, Parser)]
#[command(name = "resfuse", version, about = "Layer pruning with fusible residual convolution blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a reference architecture with random weights.
    Build(BuildArgs),
    /// Turn Conv-BN-ReLU triples into ResConv blocks.
    Convert(StageArgs),
    /// Train (sparse when --lambda > 0) on the toy dataset.
    Train(TrainArgs),
    /// Remove ResConv conv branches with small |m|.
    Prune(PruneArgs),
    /// Fuse every ResConv block into a single convolution.
    Fuse(StageArgs),
    /// FLOPs/params report and factor histogram.
    Analyze(AnalyzeArgs),
    /// Inference timing and activation byte traffic.
    Bench(BenchArgs),
    /// build, convert, sparse train, prune, retrain if worthwhile, fuse.
    RunPipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where reports go (defaults to the output directory).
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BuildArgs {
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    #[arg(long)]
    pub out: PathBuf,
    /// Square input size; channels keep the architecture's default.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Images per class in each of the train and test splits.
    #[arg(long, default_value_t = 128)]
    pub per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    /// Sparsity factor on |m|; 0 trains normally.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f32,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f32,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Fine-tune a pruned model (forces lambda to 0).
    #[arg(long)]
    pub retrain: bool,
    #[arg(long, requires = "checkpoint_dir")]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
#[group(id = "cut", required = true, multiple = false, args = ["threshold", "rate"])]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Target FLOPs reduction as a fraction in [0, 1).
    #[arg(long)]
    pub rate: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
#[group(id = "source", required = true, multiple = false, args = ["model", "arch"])]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Arch>,
    /// Report directory (same as --report-dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
#[group(id = "source", required = true, multiple = false, args = ["model", "arch"])]
pub struct BenchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
#[group(id = "cut", required = false, multiple = false, args = ["threshold", "rate"])]
pub struct PipelineArgs {
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Prune threshold on |m| (default 0.01 when --rate is absent).
    #[arg(long)]
    pub threshold: Option<f32>,
    #[arg(long)]
    pub rate: Option<f64>,
    /// Retrain only when the FLOPs reduction reaches this many percent.
    #[arg(long, default_value_t = DEFAULT_RETRAIN_CUTOFF)]
    pub retrain_cutoff: f64,
    /// Retraining epochs (defaults to --epochs).
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
    /// Reuse stage outputs already present under --out.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub common: Common,
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse::<Arch>().map_err(|e| e.to_string())
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code. Errors go to stderr as one JSON line.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let err = CliError::Usage(e.render().to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    let result = configure_threads().and_then(|()| run(&cli.command));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A second initialisation in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(command: &Command) -> Result<(), CliError> {
    let (name, result) = match command {
        Command::Build(a) => ("build", cmd_build(a)),
        Command::Convert(a) => ("convert", cmd_convert(a)),
        Command::Train(a) => ("train", cmd_train(a)),
        Command::Prune(a) => ("prune", cmd_prune(a)),
        Command::Fuse(a) => ("fuse", cmd_fuse(a)),
        Command::Analyze(a) => ("analyze", cmd_analyze(a)),
        Command::Bench(a) => ("bench", cmd_bench(a)),
        Command::RunPipeline(a) => ("run-pipeline", pipeline::run(a)),
    };
    result.map_err(|e| e.in_stage(name))
}

/// Human-readable count such as `314.02M`.
pub fn human(n: u64) -> String {
    let n = n as f64;
    if n >= 1e9 {
        format!("{:.2}B", n / 1e9)
    } else if n >= 1e6 {
        format!("{:.2}M", n / 1e6)
    } else if n >= 1e3 {
        format!("{:.2}K", n / 1e3)
    } else {
        format!("{n}")
    }
}

#[derive(Serialize)]
struct Cost {
    flops: u64,
    params: u64,
}

impl From<&CostReport> for Cost {
    fn from(r: &CostReport) -> Self {
        Cost {
            flops: r.flops,
            params: r.params,
        }
    }
}

/// Saves a model and its report. With no report dir the report files sit
/// inside the model directory and are published in the same rename.
fn emit_model(out: &Path, report_dir: Option<&Path>, g: &ModelGraph, reports: Vec<(String, Vec<u8>)>) -> Result<(), CliError> {
    let _lock = OutputLock::acquire(out)?;
    let mut files = model_files(g)?;
    match report_dir {
        Some(dir) if dir != out => {
            publish_dir(out, &files)?;
            let _report_lock = OutputLock::acquire(dir)?;
            write_files(dir, &reports)?;
        }
        _ => {
            files.extend(reports);
            publish_dir(out, &files)?;
        }
    }
    Ok(())
}

fn emit_reports(dir: Option<&Path>, reports: &[(String, Vec<u8>)]) -> Result<(), CliError> {
    if let Some(dir) = dir {
        let _lock = OutputLock::acquire(dir)?;
        write_files(dir, reports)?;
    }
    Ok(())
}

fn cmd_build(a: &BuildArgs) -> Result<(), CliError> {
    let mut opts = BuildOptions::seeded(a.common.seed);
    if let Some(size) = a.image_size {
        let channels = build_with(a.arch, &opts)?.input_shape[0];
        opts.input_shape = Some(vec![channels, size, size]);
    }
    opts.classes = a.classes;
    let g = build_with(a.arch, &opts)?;
    let cost = cost_report(&g)?;
    let report = json!({
        "arch": a.arch.to_string(),
        "seed": a.common.seed,
        "input_shape": g.input_shape,
        "nodes": g.nodes.len(),
        "cost": Cost::from(&cost),
    });
    emit_model(&a.out, a.common.report_dir.as_deref(), &g, vec![("build.json".into(), json_bytes(&report))])?;
    println!("built {} -> {} (flops {}, params {})", a.arch, a.out.display(), human(cost.flops), human(cost.params));
    Ok(())
}

fn shortcut_counts(g: &ModelGraph) -> serde_json::Value {
    let count = |k: ShortcutKind| g.resconv_blocks().filter(|(_, b)| b.shortcut.kind() == k).count();
    json!({
        "identity": count(ShortcutKind::Identity),
        "proj1x1": count(ShortcutKind::Proj1x1),
        "avgpool": count(ShortcutKind::AvgPool),
    })
}

fn convert_report(before: &ModelGraph, after: &ModelGraph) -> Result<serde_json::Value, CliError> {
    Ok(json!({
        "resconv_blocks": after.resconv_indices().len(),
        "shortcuts": shortcut_counts(after),
        "before": Cost::from(&cost_report(before)?),
        "after": Cost::from(&cost_report(after)?),
    }))
}

fn cmd_convert(a: &StageArgs) -> Result<(), CliError> {
    let g = load_model(&a.model)?;
    let c = surgery::convert_to_resconv(&g)?;
    let report = convert_report(&g, &c)?;
    emit_model(&a.out, a.common.report_dir.as_deref(), &c, vec![("convert.json".into(), json_bytes(&report))])?;
    println!("converted {} blocks -> {}", c.resconv_indices().len(), a.out.display());
    Ok(())
}

fn dataset_for(g: &ModelGraph, d: &DataArgs) -> Result<ToyDataset, CliError> {
    let data = make_toy_dataset(d.classes, d.per_class, d.image_size, d.data_seed);
    if data.image_shape() != g.input_shape.as_slice() {
        return Err(CliError::Invalid(format!(
            "toy images are {:?} but the model expects {:?}",
            data.image_shape(),
            g.input_shape
        )));
    }
    let out = g.output_shape()?;
    if out != [data.classes] {
        return Err(CliError::Invalid(format!(
            "model produces {out:?} outputs but the dataset has {} classes",
            data.classes
        )));
    }
    Ok(data)
}

/// Training settings as they appear in reports (no filesystem paths).
#[derive(Serialize)]
struct TrainSettings {
    mode: TrainMode,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    batch_size: usize,
    epochs: usize,
    lambda: f32,
    seed: u64,
}

impl From<&TrainConfig> for TrainSettings {
    fn from(c: &TrainConfig) -> Self {
        TrainSettings {
            mode: c.mode,
            lr: c.lr,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            epochs: c.epochs,
            lambda: c.lambda,
            seed: c.seed,
        }
    }
}

fn train_config(o: &OptimArgs, seed: u64, retrain: bool) -> TrainConfig {
    let mode = if retrain {
        TrainMode::Retrain
    } else if o.lambda > 0.0 {
        TrainMode::Sparse
    } else {
        TrainMode::Normal
    };
    TrainConfig {
        lr: o.lr,
        batch_size: o.batch,
        epochs: o.epochs,
        lambda: if retrain { 0.0 } else { o.lambda },
        seed,
        mode,
        ..TrainConfig::default()
    }
}

struct Trained {
    graph: ModelGraph,
    report: serde_json::Value,
    history_csv: String,
}

fn run_training(g: &ModelGraph, data: &ToyDataset, cfg: &TrainConfig) -> Result<Trained, CliError> {
    let out = train::train(g, data, cfg)?;
    let test = train::test_accuracy(&out.graph, data)?;
    let m = out.graph.m_values();
    let g = out.graph.g_values();
    let count = |f: fn(f32) -> bool| g.iter().filter(|&&v| f(v)).count();
    let report = json!({
        "config": TrainSettings::from(cfg),
        "test_acc": test,
        "final_train_acc": out.history.last().map(|h| h.acc),
        "sum_abs_m": out.graph.sum_abs_m(),
        "m": m,
        "g": g,
        "g_signs": {
            "positive": count(|v| v > 0.0),
            "zero": count(|v| v == 0.0),
            "negative": count(|v| v < 0.0),
        },
        "history": out.history,
    });
    Ok(Trained {
        history_csv: train::history_csv(&out.history),
        graph: out.graph,
        report,
    })
}

fn factor_files(g: &ModelGraph, bins: usize, title: &str) -> Vec<(String, Vec<u8>)> {
    let h = factor_histogram(&g.m_values(), bins);
    if let Some(w) = &h.warning {
        eprintln!("warning: {w}");
    }
    vec![
        ("factors.csv".into(), h.to_csv().into_bytes()),
        ("factors.svg".into(), h.to_svg(title).into_bytes()),
    ]
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let g = load_model(&a.model)?;
    let data = dataset_for(&g, &a.data)?;
    let mut cfg = train_config(&a.optim, a.common.seed, a.retrain);
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.checkpoint_dir = a.checkpoint_dir.clone();
    let t = run_training(&g, &data, &cfg)?;
    let mut reports = vec![
        ("train.json".into(), json_bytes(&t.report)),
        ("history.csv".into(), t.history_csv.into_bytes()),
    ];
    if !t.graph.resconv_indices().is_empty() {
        reports.extend(factor_files(&t.graph, 10, "layer scaling factors |m|"));
    }
    emit_model(&a.out, a.common.report_dir.as_deref(), &t.graph, reports)?;
    println!(
        "trained {} epochs ({}) -> {}; test accuracy {:.2}%",
        cfg.epochs,
        cfg.mode,
        a.out.display(),
        t.report["test_acc"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn prune_graph(g: &ModelGraph, threshold: Option<f32>, rate: Option<f64>) -> Result<(ModelGraph, PruneReport), CliError> {
    Ok(match (threshold, rate) {
        (_, Some(r)) => prune_to_rate(g, r)?,
        (Some(t), None) => prune(g, t)?,
        (None, None) => return Err(CliError::Usage("one of --threshold or --rate is required".into())),
    })
}

fn cmd_prune(a: &PruneArgs) -> Result<(), CliError> {
    let g = load_model(&a.model)?;
    let (p, report) = prune_graph(&g, a.threshold, a.rate)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit_model(&a.out, a.common.report_dir.as_deref(), &p, vec![("prune.json".into(), json_bytes(&report))])?;
    println!(
        "pruned {} of {} blocks (threshold {}) -> {}; FLOPs -{:.2}%, params -{:.2}%",
        report.pruned.len(),
        report.nodes.len(),
        report.threshold,
        a.out.display(),
        report.flops_reduction_pct,
        report.params_reduction_pct
    );
    Ok(())
}

/// Largest logit difference tolerated by `fuse`, relative to the logit scale.
pub const FUSE_TOLERANCE: f32 = 1e-3;

/// Fuses `g` and checks the result against the unfused forward pass on a
/// seeded random batch.
fn fuse_checked(g: &ModelGraph, seed: u64) -> Result<(ModelGraph, serde_json::Value), CliError> {
    let f = surgery::fuse_all(g)?;
    let mut shape = vec![4];
    shape.extend(&g.input_shape);
    let x = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let a = g.forward(&x, Mode::Infer)?;
    let b = f.forward(&x, Mode::Infer)?;
    let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
    let scale = (a.max_abs() as f32).max(1.0);
    if diff.is_nan() || diff > FUSE_TOLERANCE * scale {
        return Err(CliError::Numeric(format!(
            "fused graph deviates from the unfused one by {diff} (allowed {})",
            FUSE_TOLERANCE * scale
        )));
    }
    let report = json!({
        "fused_blocks": g.resconv_indices().len(),
        "max_abs_logit_diff": diff,
        "tolerance": FUSE_TOLERANCE * scale,
        "before": Cost::from(&cost_report(g)?),
        "after": Cost::from(&cost_report(&f)?),
    });
    Ok((f, report))
}

fn cmd_fuse(a: &StageArgs) -> Result<(), CliError> {
    let g = load_model(&a.model)?;
    let (f, report) = fuse_checked(&g, a.common.seed)?;
    emit_model(&a.out, a.common.report_dir.as_deref(), &f, vec![("fuse.json".into(), json_bytes(&report))])?;
    println!(
        "fused {} blocks -> {} (max logit diff {})",
        report["fused_blocks"],
        a.out.display(),
        report["max_abs_logit_diff"]
    );
    Ok(())
}

fn source_graph(model: Option<&Path>, arch: Option<Arch>, seed: u64) -> Result<ModelGraph, CliError> {
    match (model, arch) {
        (Some(m), _) => load_model(m),
        (None, Some(a)) => Ok(build_with(a, &BuildOptions::seeded(seed))?),
        (None, None) => Err(CliError::Usage("one of --model or --arch is required".into())),
    }
}

fn report_dir<'a>(common: &'a Common, out: Option<&'a Path>) -> Option<&'a Path> {
    common.report_dir.as_deref().or(out)
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    let g = source_graph(a.model.as_deref(), a.arch, a.common.seed)?;
    let cost = cost_report(&g)?;
    let hist = factor_histogram(&g.m_values(), a.bins);
    let report = json!({
        "name": g.name,
        "flops": cost.flops,
        "params": cost.params,
        "resconv_blocks": g.resconv_indices().len(),
        "histogram": hist,
        "nodes": cost.nodes,
    });
    let mut files = vec![("analyze.json".into(), json_bytes(&report))];
    files.extend(factor_files(&g, a.bins, "layer scaling factors |m|"));
    emit_reports(report_dir(&a.common, a.out.as_deref()), &files)?;
    println!("flops {} ({})", cost.flops, human(cost.flops));
    println!("params {} ({})", cost.params, human(cost.params));
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let g = source_graph(a.model.as_deref(), a.arch, a.common.seed)?;
    if a.batch == 0 || a.reps == 0 {
        return Err(CliError::Usage("--batch and --reps must be positive".into()));
    }
    let report = analyze::bench(&g, a.batch, a.reps, a.common.seed)?;
    emit_reports(report_dir(&a.common, a.out.as_deref()), &[("bench.json".into(), json_bytes(&report))])?;
    println!(
        "median {:.3} ms over {} runs at batch {}; activation bytes moved {}, peak {}",
        report.median_ns as f64 / 1e6,
        report.repetitions,
        report.batch,
        report.traffic.bytes_moved,
        report.traffic.peak_bytes
    );
    Ok(())
}
