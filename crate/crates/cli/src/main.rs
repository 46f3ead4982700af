//! `sepattn`: dataset generation, training, enhancement, evaluation, and
//! diagnostics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sepattn::attnmask::validate_depth;
use sepattn::datapipe::{
    generate_synthetic_dataset, load_image, save_image, DatasetManifest, DegradeParams,
    ImageRecord, Split,
};
use sepattn::diffcore::gradcheck::{select_checks, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
use sepattn::metrics::Metric;
use sepattn::trainer::{
    enhance, evaluate, load_checkpoint, train, EpochSummary, EvalModel, TrainConfig, TrainOptions,
};

/// A problem with the request itself rather than with running it.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "sepattn",
    version,
    about = "Depth-attention cycle-consistent underwater image enhancement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic paired dataset with depth maps.
    GenerateData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// default, mild or clear; ignored when --config has a `degrade` section.
        #[arg(long, default_value = "default")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split of a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the desk-scale profile instead of the full-scale defaults.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enhance one image or every image of a directory.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint (or `identity`) on a split.
    Eval {
        /// Checkpoint path, or `identity` to score the raw inputs.
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "psnr,ssim,uiqm")]
        metrics: String,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the depth-masked foreground and background of an image.
    MaskPreview {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the differentiable ops.
    GradCheck {
        /// `all` or a comma-separated list of op names.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
}

/// Configuration file: `{"train": {...}, "degrade": {...}}`, every key
/// optional, unknown keys rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ConfigFile {
    train: Option<TrainConfig>,
    degrade: Option<DegradeParams>,
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn generate_data(
    count: usize,
    size: usize,
    preset: &str,
    seed: u64,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if size < 8 {
        return Err(usage("--size must be at least 8"));
    }
    let from_file = match config {
        Some(p) => read_config(p)?.degrade,
        None => None,
    };
    let params = match from_file {
        Some(p) => p,
        None => DegradeParams::preset(preset).ok_or_else(|| {
            usage(format!(
                "unknown preset `{preset}`; expected one of {}",
                DegradeParams::PRESETS.join(", ")
            ))
        })?,
    };
    let m = generate_synthetic_dataset(count, size, &params, seed, out)?;
    println!(
        "wrote {count} samples to {} (train {}, val {}, test {})",
        out.display(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len()
    );
    Ok(())
}

fn train_cmd(
    config: Option<&Path>,
    desk: bool,
    data: &Path,
    out: &Path,
    resume: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = match config.map(read_config).transpose()?.and_then(|c| c.train) {
        Some(c) => c,
        None if desk => TrainConfig::desk(),
        None => TrainConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for w in cfg.validate().map_err(|e| usage(e.to_string()))? {
        eprintln!("warning: {w}");
    }
    let manifest = DatasetManifest::open(data)?;
    let mut report = |s: &EpochSummary| {
        println!(
            "epoch {:>4}  steps {:>4}  total {:.4}  cycle {:.4}  disc {:.4}  {:.1}s",
            s.epoch,
            s.steps,
            s.mean.attention_total,
            s.mean.cycle,
            s.mean.disc_x_fg + s.mean.disc_x_bg + s.mean.disc_y_fg + s.mean.disc_y_bg,
            s.ms as f64 / 1000.0
        );
    };
    let outcome = train(
        &manifest,
        &cfg,
        out,
        TrainOptions {
            resume,
            on_epoch: Some(&mut report),
        },
    )?;
    println!(
        "finished at epoch {} step {}; checkpoint {}, log {}",
        outcome.state.epoch,
        outcome.state.step,
        outcome.final_checkpoint.display(),
        outcome.log.display()
    );
    Ok(())
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("ppm" | "pgm" | "pnm" | "png" | "jpg" | "jpeg")
    )
}

fn enhance_cmd(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let g = &state.nets.g;
    let run = |src: &Path, dst: &Path| -> Result<()> {
        let img = load_image(src)?;
        let n = state.config.image_size;
        if img.channels != state.config.generator.in_channels || img.height != n || img.width != n {
            return Err(usage(format!(
                "{} is {}x{}x{}, the model expects {}x{n}x{n}",
                src.display(),
                img.channels,
                img.height,
                img.width,
                state.config.generator.in_channels
            )));
        }
        save_image(&enhance(g, &img)?, dst)?;
        Ok(())
    };
    if input.is_dir() {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .with_context(|| format!("reading {}", input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("{} contains no images", input.display());
        }
        for f in &files {
            run(f, &out.join(f.file_name().expect("file has a name")))?;
        }
        println!("enhanced {} images into {}", files.len(), out.display());
    } else {
        run(input, out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn eval_cmd(
    checkpoint: &str,
    data: &Path,
    split: &str,
    metrics: &str,
    csv: Option<&Path>,
) -> Result<()> {
    let split: Split = split
        .parse()
        .map_err(|e: sepattn::Error| usage(e.to_string()))?;
    let metrics = Metric::parse_list(metrics).map_err(|e| usage(e.to_string()))?;
    let manifest = DatasetManifest::open(data)?;
    let state = match checkpoint {
        "identity" => None,
        path => Some(load_checkpoint(Path::new(path))?),
    };
    let model = match &state {
        None => EvalModel::Identity,
        Some(s) => EvalModel::Generator(&s.nets.g),
    };
    let report = evaluate(model, &manifest, split, &metrics)?;
    let csv_text = report.model.to_csv();
    match csv {
        Some(p) => {
            std::fs::write(p, &csv_text).with_context(|| format!("writing {}", p.display()))?
        }
        None => print!("{csv_text}"),
    }
    for (label, r) in [("model", &report.model), ("input", &report.input)] {
        let cols: Vec<String> = r
            .metrics
            .iter()
            .zip(&r.aggregate)
            .map(|(m, a)| format!("{} {:.4} ± {:.4}", m.column(), a.mean, a.std))
            .collect();
        eprintln!("{label:<6} {}", cols.join("  "));
    }
    Ok(())
}

/// Foreground `round(I * D)` and background `I - round(I * D)`, so the two
/// images sum to the input exactly.
fn mask_preview(image: &Path, depth: &Path, out: &Path) -> Result<()> {
    let img = load_image(image)?;
    let depth = validate_depth(&load_image(depth)?).map_err(|e| usage(e.to_string()))?;
    if (depth.height(), depth.width()) != (img.height, img.width) {
        return Err(usage(format!(
            "image is {}x{}, depth map is {}x{}",
            img.height,
            img.width,
            depth.height(),
            depth.width()
        )));
    }
    let plane = img.height * img.width;
    let fg: Vec<u8> = img
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            (v as f32 * depth.values()[i % plane])
                .round()
                .clamp(0.0, v as f32) as u8
        })
        .collect();
    let bg: Vec<u8> = img.pixels.iter().zip(&fg).map(|(&v, &f)| v - f).collect();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ext = if img.channels == 1 { "pgm" } else { "ppm" };
    for (name, px) in [("foreground", fg), ("background", bg)] {
        let rec = ImageRecord::new(name, img.channels, img.height, img.width, px)?;
        save_image(&rec, &out.join(format!("{name}.{ext}")))?;
    }
    println!(
        "wrote foreground.{ext} and background.{ext} to {}",
        out.display()
    );
    Ok(())
}

fn grad_check_cmd(ops: &str, seed: u64, instances: usize) -> Result<()> {
    if instances == 0 {
        return Err(usage("--instances must be at least 1"));
    }
    let names: Vec<&str> = ops
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let checks = select_checks(&names).map_err(|e| usage(e.to_string()))?;
    let mut failed = Vec::new();
    for c in &checks {
        let r = c.run(seed, instances, DEFAULT_EPSILON, DEFAULT_TOLERANCE)?;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<20} max rel error {:.3e}  ({} entries)  {verdict}",
            r.name, r.max_rel_error, r.checked
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData {
            count,
            size,
            preset,
            seed,
            config,
            out,
        } => generate_data(count, size, &preset, seed, config.as_deref(), &out),
        Command::Train {
            config,
            desk,
            data,
            out,
            resume,
            epochs,
            seed,
        } => train_cmd(config.as_deref(), desk, &data, &out, resume, epochs, seed),
        Command::Enhance {
            checkpoint,
            input,
            out,
        } => enhance_cmd(&checkpoint, &input, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
            metrics,
            csv,
        } => eval_cmd(&checkpoint, &data, &split, &metrics, csv.as_deref()),
        Command::MaskPreview { image, depth, out } => mask_preview(&image, &depth, &out),
        Command::GradCheck {
            ops,
            seed,
            instances,
        } => grad_check_cmd(&ops, seed, instances),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<sepattn::Error>() {
        Some(
            sepattn::Error::Config(_)
            | sepattn::Error::InvalidArgument { .. }
            | sepattn::Error::DepthOutOfRange { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SATT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("warning: SATT_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
