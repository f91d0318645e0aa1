//! Command-line front end: encode/decode the channel embedding, generate
//! synthetic datasets, and train, apply, and score the segmentation methods.
//!
//! Exit codes: 0 on success, 2 for usage and input-validation problems,
//! 1 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use imems::data::{self, Manifest, Protocol};
use imems::embedding;
use imems::evaluation::{self, ConfusionMatrix, MetricsReport, TableRow};
use imems::io;
use imems::nets::checkpoint::{self, CheckpointMeta};
use imems::nets::Network;
use imems::synth::{self, SyntheticConfig};
use imems::training::{self, dataset_samples, GridPoint, TrainConfig};
use imems::Error;

#[derive(Parser)]
#[command(name = "imems", version, about = "Image-embedded segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed an image's grayscale view into per-label channel images.
    Encode(EncodeArgs),
    /// Decode a channel bundle back into a label mask.
    Decode(DecodeArgs),
    /// Generate a deterministic synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Train one method on a manifest; writes checkpoint and loss history.
    Train(TrainArgs),
    /// Predict a label mask (and optional overlay) for one image.
    Predict(PredictArgs),
    /// Score checkpoints on a manifest's held-out items.
    Evaluate(EvaluateArgs),
    /// Sweep a loss weight and score every point on the held-out items.
    GridSearch(GridSearchArgs),
}

#[derive(Args)]
struct EncodeArgs {
    /// Source image (RGB or grayscale PNG).
    #[arg(long)]
    image: PathBuf,
    /// Label mask PNG; pixel value = label id.
    #[arg(long)]
    mask: PathBuf,
    /// Output stem; writes <out>.ch00.png ... and <out>.meta.json.
    #[arg(long)]
    out: PathBuf,
    /// Total label count; inferred from the mask's maximum when omitted.
    #[arg(long)]
    num_labels: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Bundle stem or its .meta.json path.
    #[arg(long)]
    bundle: PathBuf,
    /// Output mask PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also write the grayscale image recovered from the foreground values.
    #[arg(long)]
    recover: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a full synthetic config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_labels: Option<usize>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    region_seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Training config JSON (must name a method).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for run.json, model.ckpt, history.csv.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fold index to hold out (kfold manifests only).
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image PNG.
    #[arg(long)]
    image: PathBuf,
    /// Output mask PNG.
    #[arg(long)]
    out: PathBuf,
    /// Optional blended visualization PNG.
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Overlay blend factor in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to score; repeat once per fold to get a cross-fold mean.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Output directory for run.json, metrics.csv, overlays.
    #[arg(long)]
    out: PathBuf,
    /// Score only this fold (kfold manifests).
    #[arg(long)]
    fold: Option<usize>,
    /// Seed for the fold assignment; defaults to the checkpoints' seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overlay blend factor in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Skip writing overlay images.
    #[arg(long)]
    no_overlays: bool,
}

#[derive(Args)]
struct GridSearchArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Base training config JSON (the swept weight may be omitted).
    #[arg(long)]
    config: PathBuf,
    /// Values to sweep: a single number or start:stop:step (inclusive).
    /// Sweeps lambda_seg for unet-c-multi, lambda_int for unet-c-multi-int.
    #[arg(long)]
    grid: String,
    /// Output directory for run.json, grid.csv, best.json.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fold index to hold out (kfold manifests only).
    #[arg(long)]
    fold: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err
                .downcast_ref::<Error>()
                .is_some_and(Error::is_usage);
            if usage {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Encode(args) => run_encode(args),
        Command::Decode(args) => run_decode(args),
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Predict(args) => run_predict(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::GridSearch(args) => run_grid_search(args),
    }
}

/// Record the fully resolved invocation (no timestamps, so identical runs
/// leave identical records).
fn write_run_json(dir: &Path, payload: serde_json::Value) -> anyhow::Result<()> {
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&payload)?;
    std::fs::write(&path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run_encode(args: EncodeArgs) -> anyhow::Result<()> {
    let rgb = io::load_rgb(&args.image)?;
    let gray = embedding::to_grayscale(&rgb);
    let mask = io::load_mask(&args.mask, args.num_labels)?;
    let embedded = embedding::encode(&gray, &mask)?;
    io::write_bundle(&args.out, &embedded, None)?;
    println!(
        "wrote {} channels to {}.ch*.png",
        embedded.num_labels(),
        args.out.display()
    );
    Ok(())
}

fn run_decode(args: DecodeArgs) -> anyhow::Result<()> {
    let (embedded, _) = io::read_bundle(&args.bundle)?;
    let seg = embedding::decode(&embedded);
    io::save_mask(&args.out, &seg)?;
    if let Some(path) = &args.recover {
        let gray = embedding::recover_grayscale(&embedded)?;
        io::save_gray(path, &gray)?;
    }
    println!("decoded {} labels to {}", seg.num_labels(), args.out.display());
    Ok(())
}

fn run_synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SyntheticConfig>(&raw)
                .map_err(|e| Error::parse("synthetic config", e.to_string()))?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(v) = args.num_labels {
        cfg.num_labels = v;
    }
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.height {
        cfg.height = v;
    }
    if let Some(v) = args.train {
        cfg.train = v;
    }
    if let Some(v) = args.val {
        cfg.val = v;
    }
    if let Some(v) = args.test {
        cfg.test = v;
    }
    if let Some(v) = args.region_seeds {
        cfg.region_seeds = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_run_json(&args.out, json!({"command": "synth", "config": cfg}))?;
    let manifest = synth::write_dataset(&cfg, &args.out)?;
    println!("wrote dataset manifest {}", manifest.display());
    Ok(())
}

/// Training and validation indices for a run. Fixed-split manifests use
/// their explicit lists (carving a validation subset out of train when none
/// is given); kfold manifests train on everything outside the held-out fold.
fn resolve_train_val(
    manifest: &Manifest,
    cfg: &TrainConfig,
    fold: Option<usize>,
) -> Result<(Vec<usize>, Vec<usize>), Error> {
    match manifest.protocol {
        Protocol::FixedSplit => {
            if fold.is_some() {
                return Err(Error::config(
                    "--fold only applies to kfold manifests",
                ));
            }
            let train = manifest
                .train
                .clone()
                .ok_or_else(|| Error::config("manifest has no train split"))?;
            match &manifest.val {
                Some(v) if !v.is_empty() => Ok((train, v.clone())),
                _ => training::split_validation(&train, cfg.val_fraction, cfg.seed),
            }
        }
        Protocol::Kfold => {
            let fold = fold.ok_or_else(|| {
                Error::config("kfold manifests require --fold")
            })?;
            let (plan, _) = fold_plan(manifest, cfg.seed)?;
            if fold >= plan.num_folds {
                return Err(Error::config(format!(
                    "fold {fold} out of range for {} folds",
                    plan.num_folds
                )));
            }
            let train = plan.train_items(fold);
            training::split_validation(&train, cfg.val_fraction, cfg.seed)
        }
    }
}

/// Fold assignment for a kfold manifest. The seed must match the one used
/// for training or test items would leak into training sets.
fn fold_plan(manifest: &Manifest, seed: u64) -> Result<(data::FoldPlan, usize), Error> {
    let num_folds = manifest
        .num_folds
        .ok_or_else(|| Error::config("kfold manifest lacks num_folds"))?;
    let plan = data::make_folds(&manifest.item_groups(), num_folds, seed)?;
    Ok((plan, num_folds))
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolved()?;
    let ds = data::load_dataset(&args.manifest)?;
    let (train_idx, val_idx) = resolve_train_val(&ds.manifest, &cfg, args.fold)?;
    let train_items = ds.select(&train_idx);
    let val_items = ds.select(&val_idx);

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_run_json(
        &args.out,
        json!({
            "command": "train",
            "manifest": args.manifest.display().to_string(),
            "fold": args.fold,
            "train_items": train_idx,
            "val_items": val_idx,
            "config": cfg,
        }),
    )?;

    let (mut model, history) = training::train(
        &dataset_samples(&train_items),
        &dataset_samples(&val_items),
        &cfg,
    )?;
    checkpoint::save(&args.out.join("model.ckpt"), &mut model.net, &model.meta)?;
    history.write_csv(&args.out.join("history.csv"))?;
    println!(
        "trained {} for {} epochs on {} items; kept epoch {} (val loss {:.6})",
        cfg.method,
        cfg.epochs,
        train_items.len(),
        history.selected_epoch,
        history.val_loss[history.selected_epoch - 1],
    );
    Ok(())
}

fn run_predict(args: PredictArgs) -> anyhow::Result<()> {
    let (mut net, meta) = checkpoint::load(&args.checkpoint)?;
    let image = io::load_rgb(&args.image)?;
    let seg = training::predict(&mut net, &image)?;
    io::save_mask(&args.out, &seg)?;
    if let Some(path) = &args.overlay {
        let palette = evaluation::default_palette(meta.num_labels);
        let blended = evaluation::render_overlay(&image, &seg, &palette, args.alpha)?;
        io::save_rgb(path, &blended)?;
    }
    println!(
        "predicted {} labels ({}) to {}",
        seg.num_labels(),
        meta.method,
        args.out.display()
    );
    Ok(())
}

/// Predict every selected item, pool a confusion matrix, and write overlays.
fn score_items(
    net: &mut Network<f32>,
    ds: &data::Dataset,
    indices: &[usize],
    out: &Path,
    alpha: f64,
    overlays: bool,
) -> anyhow::Result<MetricsReport> {
    let k = ds.num_labels();
    let palette = evaluation::default_palette(k);
    let mut cm = ConfusionMatrix::new(k)?;
    for item in ds.select(indices) {
        let pred = training::predict(net, &item.image)?;
        cm.accumulate(&item.mask, &pred)?;
        if overlays {
            let blended = evaluation::render_overlay(&item.image, &pred, &palette, alpha)?;
            io::save_rgb(&out.join(format!("overlay_{:03}.png", item.index)), &blended)?;
        }
    }
    Ok(evaluation::compute_metrics(&cm)?)
}

fn load_checkpoints(paths: &[PathBuf]) -> anyhow::Result<Vec<(Network<f32>, CheckpointMeta)>> {
    paths.iter().map(|p| Ok(checkpoint::load(p)?)).collect()
}

fn run_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let ds = data::load_dataset(&args.manifest)?;
    let k = ds.num_labels();
    let mut models = load_checkpoints(&args.checkpoints)?;
    for (_, meta) in &models {
        if meta.num_labels != k {
            return Err(Error::config(format!(
                "checkpoint was trained for {} labels but the dataset has {k}",
                meta.num_labels
            ))
            .into());
        }
    }

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_run_json(
        &args.out,
        json!({
            "command": "evaluate",
            "manifest": args.manifest.display().to_string(),
            "checkpoints": args.checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "fold": args.fold,
            "seed": args.seed,
            "alpha": args.alpha,
        }),
    )?;

    let overlays = !args.no_overlays;
    let mut rows = Vec::new();
    match ds.manifest.protocol {
        Protocol::FixedSplit => {
            if models.len() != 1 {
                return Err(Error::config(
                    "fixed-split evaluation takes exactly one checkpoint",
                )
                .into());
            }
            if args.fold.is_some() {
                return Err(Error::config("--fold only applies to kfold manifests").into());
            }
            let test = ds
                .manifest
                .test
                .clone()
                .filter(|t| !t.is_empty())
                .ok_or_else(|| Error::config("manifest has no test split"))?;
            let (net, meta) = &mut models[0];
            let report = score_items(net, &ds, &test, &args.out, args.alpha, overlays)?;
            rows.push(TableRow {
                method: meta.method.clone(),
                report,
            });
        }
        Protocol::Kfold => {
            // The fold assignment is derived from the training seed; all
            // checkpoints of one experiment share it.
            let seed = match args.seed {
                Some(s) => s,
                None => {
                    let s = models[0].1.seed;
                    if models.iter().any(|(_, m)| m.seed != s) {
                        return Err(Error::config(
                            "checkpoints disagree on the seed; pass --seed explicitly",
                        )
                        .into());
                    }
                    s
                }
            };
            let (plan, num_folds) = fold_plan(&ds.manifest, seed)?;
            match args.fold {
                Some(fold) => {
                    if models.len() != 1 {
                        return Err(Error::config(
                            "evaluating one fold takes exactly one checkpoint",
                        )
                        .into());
                    }
                    if fold >= num_folds {
                        return Err(Error::config(format!(
                            "fold {fold} out of range for {num_folds} folds"
                        ))
                        .into());
                    }
                    let (net, meta) = &mut models[0];
                    let report = score_items(
                        net,
                        &ds,
                        &plan.test_items(fold),
                        &args.out,
                        args.alpha,
                        overlays,
                    )?;
                    rows.push(TableRow {
                        method: format!("{}/fold{fold}", meta.method),
                        report,
                    });
                }
                None => {
                    if models.len() != num_folds {
                        return Err(Error::config(format!(
                            "kfold evaluation needs {num_folds} checkpoints (one per fold), got {}",
                            models.len()
                        ))
                        .into());
                    }
                    let mut reports = Vec::with_capacity(num_folds);
                    for (fold, (net, meta)) in models.iter_mut().enumerate() {
                        let report = score_items(
                            net,
                            &ds,
                            &plan.test_items(fold),
                            &args.out,
                            args.alpha,
                            overlays,
                        )?;
                        rows.push(TableRow {
                            method: format!("{}/fold{fold}", meta.method),
                            report: report.clone(),
                        });
                        reports.push(report);
                    }
                    rows.push(TableRow {
                        method: format!("{}/mean", models[0].1.method),
                        report: evaluation::mean_report(&reports)?,
                    });
                }
            }
        }
    }

    let csv = evaluation::metrics_csv(&rows, ds.manifest.label_names.as_deref(), k);
    let csv_path = args.out.join("metrics.csv");
    std::fs::write(&csv_path, &csv)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    print!("{csv}");
    Ok(())
}

/// `lambda,f_<label>,...,avg_f,accuracy` with six decimals, mirroring the
/// metrics table.
fn grid_csv(points: &[GridPoint], label_names: Option<&[String]>, num_labels: usize) -> String {
    let mut out = String::from("lambda");
    for c in 0..num_labels {
        let name = label_names
            .map(|n| n[c].clone())
            .unwrap_or_else(|| c.to_string());
        out.push_str(&format!(",f_{name}"));
    }
    out.push_str(",avg_f,accuracy\n");
    for p in points {
        out.push_str(&format!("{:.6}", p.lambda));
        for f in &p.report.per_class_f {
            out.push_str(&format!(",{f:.6}"));
        }
        out.push_str(&format!(
            ",{:.6},{:.6}\n",
            p.report.average_f, p.report.accuracy
        ));
    }
    out
}

fn run_grid_search(args: GridSearchArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let grid = training::parse_grid(&args.grid)?;
    let ds = data::load_dataset(&args.manifest)?;
    let (train_idx, val_idx) = resolve_train_val(&ds.manifest, &cfg, args.fold)?;
    let eval_idx = match ds.manifest.protocol {
        Protocol::FixedSplit => ds
            .manifest
            .test
            .clone()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::config("manifest has no test split"))?,
        Protocol::Kfold => {
            let (plan, _) = fold_plan(&ds.manifest, cfg.seed)?;
            plan.test_items(args.fold.expect("checked in resolve_train_val"))
        }
    };

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_run_json(
        &args.out,
        json!({
            "command": "grid-search",
            "manifest": args.manifest.display().to_string(),
            "fold": args.fold,
            "grid": grid,
            "config": cfg,
        }),
    )?;

    let train_items = ds.select(&train_idx);
    let val_items = ds.select(&val_idx);
    let eval_items = ds.select(&eval_idx);
    let (winner, points) = training::grid_search(
        &dataset_samples(&train_items),
        &dataset_samples(&val_items),
        &dataset_samples(&eval_items),
        &cfg,
        &grid,
    )?;

    let csv = grid_csv(&points, ds.manifest.label_names.as_deref(), ds.num_labels());
    let csv_path = args.out.join("grid.csv");
    std::fs::write(&csv_path, &csv)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    let best = points
        .iter()
        .find(|p| p.lambda == winner)
        .expect("winner comes from the grid");
    std::fs::write(
        args.out.join("best.json"),
        serde_json::to_string_pretty(&json!({
            "lambda": winner,
            "average_f": best.report.average_f,
            "accuracy": best.report.accuracy,
        }))? + "\n",
    )
    .context("writing best.json")?;
    print!("{csv}");
    println!(
        "best lambda {:.6} (avg F {:.6})",
        winner, best.report.average_f
    );
    Ok(())
}
