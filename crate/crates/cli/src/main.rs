//! `misure` command-line harness: dataset generation, toy-model
//! training, batch explanation, sweeps, scatter extraction, and the
//! reliability classifier.
//!
//! Exit codes: 0 success, 1 runtime failure (including every image in a
//! batch failing), 2 configuration problems.

mod frozen;
mod insight;
mod pipeline;
mod reliability_cmd;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use misure_core::baselines::{RiseConfig, SgcConfig};
use misure_core::io::{read_model, write_json, write_model};
use misure_core::metrics::dice_hard;
use misure_core::records::{read_records, write_records};
use misure_core::toy::{train_toy_model, ToyModel, ToyModelSpec, TrainConfig};
use misure_core::triangle::{
    generate_triangle, generate_triangle_tiny, load_dataset, save_dataset, ObjectSource,
};
use misure_core::{MisureConfig, MisureError, SegmentationAdapter};
use serde::Deserialize;

use pipeline::{parse_methods, resolve_out, run_explain, run_sweep, write_sweep_csv, RunSettings};

#[derive(Parser)]
#[command(name = "misure", version, about = "Saliency maps for image segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Triangle dataset directory.
    Dataset(DatasetArgs),
    /// Train the built-in toy segmentation model on a dataset.
    TrainToy(TrainToyArgs),
    /// Produce saliency maps, metrics, and a records CSV.
    Explain(ExplainArgs),
    /// Aggregate explanation metrics over a parameter grid.
    Sweep(SweepArgs),
    /// Extract scatter data from a records CSV.
    Insights(InsightsArgs),
    /// Train, evaluate, or apply the reliability classifier.
    Reliability(ReliabilityArgs),
}

/// Marker for problems that should exit with code 2.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        cause.is::<ConfigError>()
            || cause
                .downcast_ref::<MisureError>()
                .is_some_and(|m| matches!(m, MisureError::Config(_)))
    })
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(if is_config_error(&e) { 2 } else { 1 });
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Dataset(args) => cmd_dataset(args),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Insights(args) => cmd_insights(args),
        Command::Reliability(args) => cmd_reliability(args),
    }
}

/// Flags mirroring the engine configuration. Precedence is defaults,
/// then the JSON config file, then these flags.
#[derive(Args, Clone, Debug)]
struct ConfigFlags {
    /// JSON file with config fields; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long = "clamp-low")]
    clamp_low: Option<f64>,
    /// Optimization grid as `HxW` or a single side length.
    #[arg(long = "mask-size")]
    mask_size: Option<String>,
    #[arg(long = "alpha-fg")]
    alpha_fg: Option<f64>,
    #[arg(long = "alpha-bg")]
    alpha_bg: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "kernel-radius")]
    kernel_radius: Option<u32>,
    #[arg(long = "max-dilations")]
    max_dilations: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long = "rise-masks")]
    rise_masks: Option<usize>,
    #[arg(long = "rise-grid")]
    rise_grid: Option<usize>,
    #[arg(long = "rise-keep-prob")]
    rise_keep_prob: Option<f64>,
    /// Binarization thresholds for rise/occlusion rows (repeatable).
    #[arg(long = "threshold")]
    thresholds: Vec<f64>,
    #[arg(long = "sgc-layer")]
    sgc_layer: Option<String>,
    /// Binarization thresholds for seggradcam rows (repeatable).
    #[arg(long = "sgc-threshold")]
    sgc_thresholds: Vec<f64>,
    #[arg(long = "occ-patch")]
    occ_patch: Option<usize>,
    #[arg(long = "occ-stride")]
    occ_stride: Option<usize>,
}

/// JSON config file shape; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ConfigFile {
    tau: Option<f64>,
    lr: Option<f64>,
    lambda: Option<f64>,
    gamma: Option<f64>,
    beta: Option<f64>,
    alpha_bg: Option<f64>,
    alpha_fg: Option<f64>,
    iterations: Option<usize>,
    clamp_low: Option<f64>,
    mask_size: Option<(usize, usize)>,
    kernel_radius: Option<u32>,
    eps: Option<f64>,
    seed: Option<u64>,
    max_dilations: Option<usize>,
    rise_masks: Option<usize>,
    rise_grid: Option<usize>,
    rise_keep_prob: Option<f64>,
    thresholds: Option<Vec<f64>>,
    sgc_layer: Option<String>,
    sgc_thresholds: Option<Vec<f64>>,
    occ_patch: Option<usize>,
    occ_stride: Option<usize>,
}

fn parse_mask_size(text: &str) -> anyhow::Result<(usize, usize)> {
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| config_err(format!("bad mask size component `{s}`")))
    };
    match text.split_once('x') {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let side = parse(text)?;
            Ok((side, side))
        }
    }
}

fn build_settings(
    flags: &ConfigFlags,
    method: &str,
    corrupt_fraction: f64,
    split: &str,
    adapter_name: &str,
) -> anyhow::Result<RunSettings> {
    let mut cfg = MisureConfig::default();
    let mut rise = RiseConfig::default();
    let mut sgc = SgcConfig::default();
    let mut occ_patch = None;
    let mut occ_stride = None;

    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))
            .map_err(|e| config_err(format!("{e:#}")))?;
        let file: ConfigFile = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("config file {}: {e}", path.display())))?;
        macro_rules! take {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        take!(cfg.tau, file.tau);
        take!(cfg.lr, file.lr);
        take!(cfg.lambda, file.lambda);
        take!(cfg.gamma, file.gamma);
        take!(cfg.beta, file.beta);
        take!(cfg.alpha_bg, file.alpha_bg);
        take!(cfg.alpha_fg, file.alpha_fg);
        take!(cfg.iterations, file.iterations);
        take!(cfg.clamp_low, file.clamp_low);
        take!(cfg.mask_size, file.mask_size);
        take!(cfg.kernel_radius, file.kernel_radius);
        take!(cfg.eps, file.eps);
        take!(cfg.seed, file.seed);
        cfg.max_dilations = file.max_dilations.or(cfg.max_dilations);
        take!(rise.n_masks, file.rise_masks);
        take!(rise.grid, file.rise_grid);
        take!(rise.keep_prob, file.rise_keep_prob);
        take!(rise.thresholds, file.thresholds);
        take!(sgc.layer, file.sgc_layer);
        take!(sgc.thresholds, file.sgc_thresholds);
        occ_patch = file.occ_patch;
        occ_stride = file.occ_stride;
    }

    macro_rules! take {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    take!(cfg.tau, flags.tau);
    take!(cfg.lr, flags.lr);
    take!(cfg.lambda, flags.lambda);
    take!(cfg.gamma, flags.gamma);
    take!(cfg.beta, flags.beta);
    take!(cfg.iterations, flags.iters);
    take!(cfg.clamp_low, flags.clamp_low);
    take!(cfg.alpha_fg, flags.alpha_fg);
    take!(cfg.alpha_bg, flags.alpha_bg);
    take!(cfg.seed, flags.seed);
    take!(cfg.kernel_radius, flags.kernel_radius);
    take!(cfg.eps, flags.eps);
    cfg.max_dilations = flags.max_dilations.or(cfg.max_dilations);
    if let Some(text) = &flags.mask_size {
        cfg.mask_size = parse_mask_size(text)?;
    }
    take!(rise.n_masks, flags.rise_masks);
    take!(rise.grid, flags.rise_grid);
    take!(rise.keep_prob, flags.rise_keep_prob);
    if !flags.thresholds.is_empty() {
        rise.thresholds = flags.thresholds.clone();
    }
    if let Some(layer) = &flags.sgc_layer {
        sgc.layer = layer.clone();
    }
    if !flags.sgc_thresholds.is_empty() {
        sgc.thresholds = flags.sgc_thresholds.clone();
    }
    occ_patch = flags.occ_patch.or(occ_patch);
    occ_stride = flags.occ_stride.or(occ_stride);

    rise.seed = cfg.seed;
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    rise.validate().map_err(|e| config_err(e.to_string()))?;
    if !(0.0..=1.0).contains(&corrupt_fraction) {
        return Err(config_err(format!(
            "corrupt fraction {corrupt_fraction} outside [0, 1]"
        )));
    }

    Ok(RunSettings {
        misure: cfg,
        rise,
        sgc,
        occ_patch,
        occ_stride,
        methods: parse_methods(method).map_err(|e| config_err(e.to_string()))?,
        corrupt_fraction,
        split: split.to_string(),
        adapter_name: adapter_name.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Triangle,
    TriangleTiny,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long, value_enum, default_value = "triangle-tiny")]
    kind: DatasetKind,
    /// Total sample count before the 70/30 split.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory with Fashion-MNIST IDX files for glyph objects.
    #[arg(long = "fashion-dir")]
    fashion_dir: Option<PathBuf>,
}

fn cmd_dataset(args: DatasetArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out, "dataset");
    let split = match args.kind {
        DatasetKind::TriangleTiny => generate_triangle_tiny(args.n, args.size, args.seed)?,
        DatasetKind::Triangle => {
            let source = match &args.fashion_dir {
                Some(dir) => ObjectSource::FashionMnistDir(dir.clone()),
                None => ObjectSource::Geometric,
            };
            generate_triangle(args.n, args.size, &source, args.seed)?
        }
    };
    save_dataset(&split, &out)?;
    println!(
        "dataset: {} train, {} val at {}",
        split.train.len(),
        split.val.len(),
        out.display()
    );
    Ok(())
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model file path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature widths per level, comma separated.
    #[arg(long, default_value = "8,16,32")]
    channels: String,
    #[arg(long = "kernel-size", default_value_t = 3)]
    kernel_size: usize,
}

fn cmd_train_toy(args: TrainToyArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out, "toy.model");
    let channels: Vec<usize> = args
        .channels
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| config_err(format!("bad channel width `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    let dataset = load_dataset(&args.data)?;
    let images: Vec<_> = dataset.train.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<_> = dataset.train.iter().map(|s| s.gt_mask.data().clone()).collect();

    let mut model = ToyModel::new(ToyModelSpec {
        in_channels: 1,
        num_classes: 2,
        channels,
        kernel_size: args.kernel_size,
        seed: args.seed,
        zero_head: false,
    })
    .map_err(|e| config_err(e.to_string()))?;
    let losses = train_toy_model(
        &mut model,
        &images,
        &labels,
        &TrainConfig {
            epochs: args.epochs,
            lr: args.lr,
            seed: args.seed,
        },
    )?;
    for (epoch, loss) in losses.iter().enumerate() {
        eprintln!("epoch {epoch}: loss {loss:.6}");
    }

    let mut dice_sum = 0.0;
    let mut dice_n = 0usize;
    for sample in &dataset.val {
        let probs = model.forward(&sample.image)?;
        let pred = misure_core::masks::binarize_prediction(&probs, 1)?;
        if let Ok(d) = dice_hard(&pred, &sample.gt_mask) {
            dice_sum += d;
            dice_n += 1;
        }
    }
    write_model(&out, &model.to_tensors())?;
    println!(
        "model: {} params, val dice {:.4} over {} images, saved to {}",
        model.num_params(),
        if dice_n > 0 { dice_sum / dice_n as f64 } else { 0.0 },
        dice_n,
        out.display()
    );
    Ok(())
}

fn build_adapter(
    name: &str,
    model: Option<&Path>,
    frozen_dir: Option<&Path>,
) -> anyhow::Result<Box<dyn SegmentationAdapter>> {
    match name {
        "toy" => {
            let path = model.ok_or_else(|| config_err("adapter `toy` needs --model"))?;
            let tensors = read_model(path)?;
            Ok(Box::new(ToyModel::from_tensors(&tensors)?))
        }
        "frozen" => {
            let dir = frozen_dir
                .ok_or_else(|| config_err("adapter `frozen` needs --frozen-dir"))?;
            Ok(Box::new(frozen::FrozenAdapter::load(dir)?))
        }
        other => Err(config_err(format!(
            "unknown adapter `{other}` (expected toy or frozen)"
        ))),
    }
}

fn load_split(
    data: &Path,
    split: &str,
    limit: Option<usize>,
) -> anyhow::Result<Vec<misure_core::triangle::TriangleSample>> {
    let dataset = load_dataset(data)?;
    let mut samples = match split {
        "train" => dataset.train,
        "val" => dataset.val,
        other => return Err(config_err(format!("unknown split `{other}`"))),
    };
    if let Some(k) = limit {
        samples.truncate(k);
    }
    Ok(samples)
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value = "toy")]
    adapter: String,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "frozen-dir")]
    frozen_dir: Option<PathBuf>,
    /// Comma-separated: misure, rise, occlusion, seggradcam, all.
    #[arg(long, default_value = "misure")]
    method: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    /// Leading fraction of the corpus to corrupt with input noise.
    #[arg(long = "corrupt-fraction", default_value_t = 0.0)]
    corrupt_fraction: f64,
    #[command(flatten)]
    config: ConfigFlags,
}

fn cmd_explain(args: ExplainArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out, "explain");
    let settings = build_settings(
        &args.config,
        &args.method,
        args.corrupt_fraction,
        &args.split,
        &args.adapter,
    )?;
    let adapter = build_adapter(&args.adapter, args.model.as_deref(), args.frozen_dir.as_deref())?;
    let samples = load_split(&args.data, &args.split, args.limit)?;

    let outcome = run_explain(adapter.as_ref(), samples, &settings, Some(&out))?;
    if outcome.records.is_empty() {
        anyhow::bail!("all {} images failed", outcome.n_images);
    }
    write_records(&out.join("records.csv"), &outcome.records)?;
    write_json(
        &out.join("run_config.json"),
        &serde_json::json!({
            "fingerprint": settings.fingerprint(),
            "misure": settings.misure,
            "rise": settings.rise,
            "sgc": settings.sgc,
            "corrupt_fraction": settings.corrupt_fraction,
            "split": settings.split,
            "adapter": settings.adapter_name,
        }),
    )?;
    println!(
        "records: {} over {} images ({} failed), out: {}",
        outcome.records.len(),
        outcome.n_images,
        outcome.n_failed,
        out.display()
    );
    Ok(())
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long = "grid-lr", default_value = "0.1")]
    grid_lr: String,
    #[arg(long = "grid-lambda", default_value = "0.001,0.01,0.1")]
    grid_lambda: String,
    /// Mask-size grid (`16x16,32x32`); replaces the lr/lambda grid.
    #[arg(long = "grid-mask-size")]
    grid_mask_size: Option<String>,
    #[command(flatten)]
    config: ConfigFlags,
}

fn parse_grid(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| config_err(format!("bad grid value `{s}`")))
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out, "sweep");
    let settings = build_settings(&args.config, "misure", 0.0, &args.split, "toy")?;
    let adapter = build_adapter("toy", Some(&args.model), None)?;
    let samples = load_split(&args.data, &args.split, args.limit)?;

    let cells: Vec<(f64, f64, (usize, usize))> = match &args.grid_mask_size {
        Some(text) => text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| Ok((settings.misure.lr, settings.misure.lambda, parse_mask_size(s)?)))
            .collect::<anyhow::Result<_>>()?,
        None => {
            let lrs = parse_grid(&args.grid_lr)?;
            let lambdas = parse_grid(&args.grid_lambda)?;
            let mut cells = Vec::new();
            for &lr in &lrs {
                for &lambda in &lambdas {
                    cells.push((lr, lambda, settings.misure.mask_size));
                }
            }
            cells
        }
    };
    if cells.is_empty() {
        return Err(config_err("empty sweep grid"));
    }

    let rows = run_sweep(adapter.as_ref(), &samples, &settings, &cells)?;
    if rows.iter().all(|r| r.n_records == 0) {
        anyhow::bail!("every sweep cell failed on every image");
    }
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    for row in &rows {
        println!(
            "lr={} lambda={} mask={}x{}: dice {:.4}, ratio {:.4} ({} records)",
            row.lr,
            row.lambda,
            row.mask_size.0,
            row.mask_size.1,
            row.mean_dice_explained,
            row.mean_perturbation_ratio,
            row.n_records
        );
    }
    Ok(())
}

#[derive(Args)]
struct InsightsArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also render scatter PNGs.
    #[arg(long)]
    plot: bool,
}

fn cmd_insights(args: InsightsArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out, "insights");
    let records = read_records(&args.records)?;
    insight::write_insights(&records, &out, args.plot)?;
    println!("insights: {} points, out: {}", records.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReliabilityMode {
    Train,
    Eval,
    Predict,
}

#[derive(Args)]
struct ReliabilityArgs {
    #[arg(long)]
    records: PathBuf,
    /// Dataset root with ground-truth masks (train/eval modes).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, value_enum)]
    mode: ReliabilityMode,
    /// Model JSON: output of train, input of eval/predict.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Ground-truth Dice threshold defining a reliable prediction.
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_reliability(args: ReliabilityArgs) -> anyhow::Result<()> {
    let out = resolve_out(args.out, "reliability");
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(config_err(format!(
            "threshold {} outside [0, 1]",
            args.threshold
        )));
    }
    let records = read_records(&args.records)?;
    let records_root = args
        .records
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let model_path = args
        .model
        .clone()
        .unwrap_or_else(|| out.join("reliability_model.json"));

    match args.mode {
        ReliabilityMode::Train => {
            let data = args
                .data
                .as_deref()
                .ok_or_else(|| config_err("train mode needs --data for ground truth"))?;
            reliability_cmd::run_train(
                &records,
                &records_root,
                data,
                &args.split,
                args.threshold,
                &model_path,
            )?;
            println!("model: {}", model_path.display());
        }
        ReliabilityMode::Eval => {
            let data = args
                .data
                .as_deref()
                .ok_or_else(|| config_err("eval mode needs --data for ground truth"))?;
            let model = reliability_cmd::load_model_file(&model_path)?;
            reliability_cmd::run_eval(&records, &records_root, data, &args.split, &model, &out)?;
            println!("eval: {}", out.join("reliability_eval.csv").display());
        }
        ReliabilityMode::Predict => {
            let model = reliability_cmd::load_model_file(&model_path)?;
            reliability_cmd::run_predict(&records, &model, &out)?;
            println!("scores: {}", out.join("reliability_scores.csv").display());
        }
    }
    Ok(())
}
