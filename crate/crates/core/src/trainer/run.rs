use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::datapipe::{DatasetManifest, PairedSample, Split};
use crate::error::{Error, Result};
use crate::losses::{CycleBatch, LossReport};
use crate::trainer::log::{epoch_means, read_log, TrainLogRow, LOG_HEADER};
use crate::trainer::{load_checkpoint, save_checkpoint, train_step, TrainConfig, TrainState};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.satt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: usize,
    pub mean: LossReport,
    pub ms: u64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochSummary)>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
}

fn checkpoint_name(epoch: u64) -> String {
    format!("ckpt_e{epoch:04}.satt")
}

fn load_train_samples(
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<Vec<PairedSample>> {
    let samples = manifest.load_split(Split::Train, config.depth_fallback)?;
    let n = config.image_size;
    let c = config.generator.in_channels;
    for s in &samples {
        let img = &s.distorted;
        if (img.channels, img.height, img.width) != (c, n, n) {
            return Err(Error::Dataset(format!(
                "sample `{}` is {}x{}x{}, the configuration expects {c}x{n}x{n}",
                img.id, img.channels, img.height, img.width
            )));
        }
    }
    Ok(samples)
}

/// Opens the log for appending. A fresh run starts a new file; a resumed
/// run keeps the rows up to the checkpoint's step, since later ones are
/// reproduced exactly by the continued run.
fn open_log(path: &Path, resumed_at: Option<u64>) -> Result<File> {
    let kept = match resumed_at {
        Some(step) if path.is_file() => read_log(path)?
            .into_iter()
            .filter(|r| r.step <= step)
            .collect(),
        _ => Vec::new(),
    };
    let mut text = format!("{LOG_HEADER}\n");
    for r in &kept {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Runs `config.epochs` epochs over the train split, writing
/// `train_log.csv`, numbered checkpoints, and `final.satt` into `out_dir`.
pub fn train(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    out_dir: &Path,
    options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = match &options.resume {
        Some(path) => {
            let mut s = load_checkpoint(path)?;
            if s.config.resume_hash() != config.resume_hash() {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration (hash {} vs {})",
                    path.display(),
                    s.config.resume_hash(),
                    config.resume_hash()
                )));
            }
            s.config = config.clone();
            s
        }
        None => TrainState::new(config.clone())?,
    };
    let log_path = out_dir.join(LOG_FILE);
    let mut log = open_log(&log_path, options.resume.as_ref().map(|_| state.step))?;
    let mut on_epoch = options.on_epoch;

    let epochs = config.epochs as u64;
    if state.epoch < epochs {
        let samples = load_train_samples(manifest, config)?;
        if samples.is_empty() {
            return Err(Error::Dataset("the train split is empty".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        while state.epoch < epochs {
            let epoch = state.epoch + 1;
            let started = Instant::now();
            order.sort_unstable();
            order.shuffle(&mut state.rng);
            let mut rows = Vec::new();
            for chunk in order.chunks(config.batch_size) {
                let picked: Vec<PairedSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let batch = CycleBatch::from_samples(&picked)?;
                let t0 = Instant::now();
                let report = train_step(&mut state, &batch)?;
                let row = TrainLogRow {
                    epoch,
                    step: state.step,
                    report,
                    ms: t0.elapsed().as_millis() as u64,
                };
                writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
                rows.push(row);
            }
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            state.epoch = epoch;
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every as u64 == 0 {
                save_checkpoint(&state, &out_dir.join(checkpoint_name(epoch)))?;
            }
            if let Some(cb) = on_epoch.as_mut() {
                let mean = epoch_means(&rows)[0].1;
                cb(&EpochSummary {
                    epoch,
                    steps: rows.len(),
                    mean,
                    ms: started.elapsed().as_millis() as u64,
                });
            }
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&state, &final_checkpoint)?;
    Ok(TrainOutcome {
        state,
        final_checkpoint,
        log: log_path,
    })
}
