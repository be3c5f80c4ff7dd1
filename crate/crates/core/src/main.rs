use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mcdseg::checkpoint;
use mcdseg::data::{self, Split, SynthConfig};
use mcdseg::mc::{McPrediction, UncertaintyReduction, DEFAULT_SAMPLES};
use mcdseg::metrics::{binarize, dice, DEFAULT_THRESHOLD};
use mcdseg::report::{self, EvaluationRecord, SavePng};
use mcdseg::training::{self, TrainConfig};
use mcdseg::unet::{build_unet, ModelGraph, UNetConfig};
use mcdseg::Error;

#[derive(Parser)]
#[command(
    name = "mcdseg",
    version,
    about = "Monte-Carlo-Dropout UNet segmentation with uncertainty maps"
)]
struct Cli {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo sample count T
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Output directory (or file for `evaluate`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic stained-cell dataset
    GenData,
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Monte Carlo prediction and uncertainty maps for PNG images
    Predict(PredictArgs),
    /// Score a checkpoint on one split of a dataset
    Evaluate(EvaluateArgs),
    /// Summary tables and boxplots from evaluation records
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Masks named like the images; adds a truth panel
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Also write the composite panel image
    #[arg(long)]
    panels: bool,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "MCD UNet")]
    name: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Also render boxplot PNGs
    #[arg(long)]
    plot: bool,
    #[arg(required = true)]
    records: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: UNetConfig,
    train: TrainConfig,
    synth: SynthConfig,
    split: SplitConfig,
    inference: InferenceConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SplitConfig {
    ratios: [f64; 3],
    seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.7, 0.15, 0.15],
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InferenceConfig {
    samples: usize,
    threshold: f64,
    seed: u64,
    reduction: UncertaintyReduction,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            samples: DEFAULT_SAMPLES,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            reduction: UncertaintyReduction::PixelMean,
        }
    }
}

impl RunConfig {
    fn load(cli: &Cli) -> anyhow::Result<Self> {
        let mut cfg: RunConfig = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
            cfg.inference.seed = seed;
        }
        if let Some(t) = cli.samples {
            cfg.inference.samples = t;
        }
        if let Some(thr) = cli.threshold {
            cfg.inference.threshold = thr;
        }
        if cfg.inference.samples == 0 {
            return Err(Error::Config("sample count must be at least 1".into()).into());
        }
        if !(cfg.inference.threshold > 0.0 && cfg.inference.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0, 1)",
                cfg.inference.threshold
            ))
            .into());
        }
        Ok(cfg)
    }
}

fn out_dir(cli: &Cli) -> anyhow::Result<&Path> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))?;
    Ok(out)
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn gen_data(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<()> {
    let out = out_dir(cli)?;
    let mut ds = data::generate_synthetic(&cfg.synth)?;
    data::split(&mut ds, cfg.split.ratios, cfg.split.seed)?;
    create_dir(out)?;
    data::save_dataset(&ds, out)?;
    let counts: Vec<String> = Split::ASSIGNED
        .iter()
        .map(|&s| format!("{} {}", s.as_str(), ds.subset(s).len()))
        .collect();
    println!(
        "wrote {} items to {} ({})",
        ds.len(),
        out.display(),
        counts.join(", ")
    );
    Ok(())
}

fn train(cli: &Cli, cfg: &RunConfig, args: &TrainArgs) -> anyhow::Result<()> {
    let out = out_dir(cli)?;
    let mut train_cfg = cfg.train.clone();
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    let ds = data::load_dataset_dir(&args.data)?;
    if ds.height != cfg.model.input_extent || ds.width != cfg.model.input_extent {
        bail!(Error::Config(format!(
            "dataset is {}×{} but model.input_extent is {}",
            ds.height, ds.width, cfg.model.input_extent
        )));
    }
    let model = build_unet(&cfg.model)?;
    create_dir(out)?;
    eprintln!(
        "training {} parameters on {} items",
        model.param_count(),
        ds.subset(Split::Train).len()
    );
    let outcome = training::train(model, &ds, &train_cfg, |r| {
        eprintln!(
            "epoch {:3}  train {:.4}  val {:.4}  dice {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_dice
        )
    })?;
    checkpoint::save(&outcome.model, &out.join("model.ckpt"))?;
    outcome.history.write(&out.join("history.csv"))?;
    println!(
        "best epoch {} of {}, checksum {:016x}",
        outcome.history.best_epoch,
        outcome.history.stopped_epoch,
        checkpoint::checksum(&outcome.model)?
    );
    Ok(())
}

fn write_prediction(
    out: &Path,
    stem: &str,
    pred: &McPrediction,
    threshold: f64,
) -> anyhow::Result<()> {
    let mask = binarize(&pred.mean_prob, threshold)?;
    report::grid_to_gray(&pred.mean_prob, report::prob_to_gray)
        .save_png(&out.join(format!("{stem}_mean.png")))?;
    report::mask_to_gray(&mask).save_png(&out.join(format!("{stem}_mask.png")))?;
    report::grid_to_gray(&pred.entropy_map, report::uncertainty_to_gray)
        .save_png(&out.join(format!("{stem}_entropy.png")))?;
    report::grid_to_gray(&pred.aleatoric_map, report::uncertainty_to_gray)
        .save_png(&out.join(format!("{stem}_aleatoric.png")))?;
    for (name, grid) in [
        ("mean", &pred.mean_prob),
        ("entropy", &pred.entropy_map),
        ("aleatoric", &pred.aleatoric_map),
        ("epistemic", &pred.epistemic_map),
    ] {
        report::write_grid(grid, &out.join(format!("{stem}_{name}.grid")))?;
    }
    let path = out.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&pred.record())?;
    fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn predict(cli: &Cli, cfg: &RunConfig, args: &PredictArgs) -> anyhow::Result<()> {
    let out = out_dir(cli)?;
    let model = checkpoint::load(&args.checkpoint)?;
    create_dir(out)?;
    let inf = &cfg.inference;
    for path in &args.images {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("cannot name output for {}", path.display())))?;
        let image = data::read_rgb(path)?;
        let pred = McPrediction::predict(&model, &image, inf.samples, inf.seed)?;
        write_prediction(out, stem, &pred, inf.threshold)?;
        if args.panels {
            let truth = match &args.masks {
                Some(dir) => Some(data::read_mask(&dir.join(format!("{stem}.png")))?),
                None => None,
            };
            report::render_panels(&image, truth.as_ref(), &pred.mean_prob, &pred.entropy_map)?
                .save_png(&out.join(format!("{stem}_panels.png")))?;
        }
        println!("{stem}: mean entropy {:.5}", pred.entropy_map.mean());
    }
    Ok(())
}

fn score(
    model: &ModelGraph,
    item: &data::SegItem,
    inf: &InferenceConfig,
) -> anyhow::Result<(f64, f64)> {
    let pred = McPrediction::predict(model, &item.image, inf.samples, inf.seed)?;
    let d = dice(&binarize(&pred.mean_prob, inf.threshold)?, &item.mask)?.value;
    Ok((d, pred.uncertainty_score(inf.reduction, inf.threshold)))
}

fn evaluate(cli: &Cli, cfg: &RunConfig, args: &EvaluateArgs) -> anyhow::Result<()> {
    let out = out_dir(cli)?;
    let split = Split::parse(&args.split)
        .ok_or_else(|| Error::Config(format!("unknown split {:?}", args.split)))?;
    let model = checkpoint::load(&args.checkpoint)?;
    let ds = data::load_dataset_dir(&args.data)?;
    let items = ds.subset(split);
    if items.is_empty() {
        bail!(Error::Data(format!("split {} is empty", split.as_str())));
    }
    let inf = &cfg.inference;
    let mut rec = EvaluationRecord {
        model: args.name.clone(),
        param_count: model.param_count(),
        samples: inf.samples,
        seed: inf.seed,
        threshold: inf.threshold,
        reduction: inf.reduction,
        stems: Vec::new(),
        groups: Vec::new(),
        dice: Vec::new(),
        uncertainty: Vec::new(),
    };
    for item in items {
        let (d, u) = score(&model, item, inf)?;
        rec.stems.push(item.stem.clone());
        rec.groups.push(item.group);
        rec.dice.push(d);
        rec.uncertainty.push(u);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    rec.write(out)?;
    let summary = mcdseg::metrics::summarize(&rec.dice, rec.meta())?;
    println!("{}", report::format_row(&summary));
    Ok(())
}

fn run_report(cli: &Cli, args: &ReportArgs) -> anyhow::Result<()> {
    let records = args
        .records
        .iter()
        .map(|p| EvaluationRecord::read(p))
        .collect::<mcdseg::Result<Vec<_>>>()?;
    let rep = report::cmd_report(&records)?;
    print!("{}", rep.text);
    if let Some(out) = &cli.out {
        report::write_report(&rep, &records, out, args.plot)?;
    }
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MCDSEG_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("MCDSEG_THREADS={v:?} is not a positive integer"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let cfg = RunConfig::load(cli)?;
    match &cli.command {
        Command::GenData => gen_data(cli, &cfg),
        Command::Train(a) => train(cli, &cfg, a),
        Command::Predict(a) => predict(cli, &cfg, a),
        Command::Evaluate(a) => evaluate(cli, &cfg, a),
        Command::Report(a) => run_report(cli, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(e) if e.is_numeric() => 4,
        Some(_) => 3,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
