use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::Config;
use crate::datagen::{make_bundle, save_bundle, DatasetBundle, PoolKind};
use crate::diffusion::{ancestral_sample, save_pool, train_denoiser, Denoiser, PoolMeta, POOL_FILE};
use crate::models::{load_checkpoint, save_checkpoint, DenoiserConfig};
use crate::ssl::{read_metrics_csv, train_run, write_metrics_csv, Evaluation, RunRecord};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const DONE_MARKER: &str = "done.marker";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFUSION_FILE: &str = "confusion.json";
pub const DENOISER_DIR: &str = "denoiser";
pub const DENOISER_LOSS_FILE: &str = "denoiser_loss.csv";

/// Renders the bundle described by `cfg.data` and writes it to `dir`.
pub fn gen_data(cfg: &Config, dir: &Path) -> Result<DatasetBundle> {
    let bundle = make_bundle(&cfg.data)?;
    save_bundle(dir, &bundle, cfg.data.seed, &cfg.data.bias)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    Ok(bundle)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiffusionRun {
    pub checkpoint: PathBuf,
    pub digest: String,
    pub steps_done: usize,
    pub seconds: f64,
    pub final_loss: Option<f64>,
}

/// Fits the denoiser on the clean real unlabeled pool of `cfg.data` and
/// writes the EMA weights to `<dir>/denoiser/` plus the loss trace.
pub fn train_diffusion(cfg: &Config, dir: &Path) -> Result<DiffusionRun> {
    let mut data = cfg.data.clone();
    data.pool_kind = PoolKind::RealClean;
    data.pool_path = None;
    let bundle = make_bundle(&data)?;
    let schedule = cfg.diffusion.schedule.build()?;
    let out = train_denoiser(&cfg.diffusion.train, &cfg.diffusion.denoiser, &schedule, &bundle.unlabeled.images)?;
    let checkpoint = dir.join(DENOISER_DIR);
    save_checkpoint(&checkpoint, &out.params, &cfg.diffusion.denoiser)?;
    let trace = dir.join(DENOISER_LOSS_FILE);
    let mut body = String::from("step,loss\n");
    for (k, l) in out.loss_trace.iter().enumerate() {
        body.push_str(&format!("{},{l}\n", (k + 1) * 100));
    }
    fs::write(&trace, body).map_err(|e| Error::io(&trace, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    Ok(DiffusionRun {
        checkpoint,
        digest: out.params.digest()?,
        steps_done: out.steps_done,
        seconds: out.seconds,
        final_loss: out.loss_trace.last().copied(),
    })
}

/// Draws `cfg.diffusion.sampler.num_samples` images from the denoiser
/// checkpoint in `checkpoint` and writes the pool files into `dir`.
/// Returns the pool file path.
pub fn sample_pool(cfg: &Config, checkpoint: &Path, dir: &Path) -> Result<PathBuf> {
    if !checkpoint.join("manifest.json").is_file() {
        return Err(Error::Missing(format!(
            "no denoiser checkpoint at {}; run `train-diffusion` first",
            checkpoint.display()
        )));
    }
    let (params, config): (_, DenoiserConfig) = load_checkpoint(checkpoint)?;
    let schedule = cfg.diffusion.schedule.build()?;
    if config.max_timestep != schedule.steps() {
        return Err(Error::Config(format!(
            "checkpoint was trained for T = {}, config schedule has T = {}",
            config.max_timestep,
            schedule.steps()
        )));
    }
    let digest = params.digest()?;
    let item = [config.in_channels, config.height, config.width];
    let s = &cfg.diffusion.sampler;
    let denoiser = Denoiser { config, params };
    let samples = ancestral_sample(&denoiser, &schedule, s.num_samples, &item, s.batch, s.seed)?;
    let meta = PoolMeta {
        count: s.num_samples,
        seed: s.seed,
        schedule: cfg.diffusion.schedule.clone(),
        denoiser_checkpoint_sha256: digest,
    };
    save_pool(dir, &samples, &meta)?;
    Ok(dir.join(POOL_FILE))
}

/// Outcome of one `(cell, seed)` training run.
#[derive(Debug, Clone, PartialEq)]
pub struct SslRun {
    pub records: Vec<RunRecord>,
    /// Test accuracy of the final logged row.
    pub accuracy: f64,
    /// True when the run was already complete and was not retrained.
    pub resumed: bool,
}

/// One SSL training run persisted under `dir`:
/// `metrics.csv`, `config.json`, `confusion.json`, `checkpoint/` (EMA
/// weights) and finally `done.marker`. A directory that already holds the
/// marker is read back instead of retrained.
pub fn run_ssl(cfg: &Config, dir: &Path) -> Result<SslRun> {
    if dir.join(DONE_MARKER).is_file() {
        let records = read_metrics_csv(&dir.join(METRICS_FILE))?;
        return Ok(SslRun {
            accuracy: final_accuracy(&records, dir)?,
            records,
            resumed: true,
        });
    }
    cfg.validate()?;
    let bundle = make_bundle(&cfg.data)?;
    let mut schedule = cfg.schedule.build(cfg.classifier.num_classes)?;
    let out = train_run(&cfg.train, &cfg.classifier, &bundle, &mut schedule)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    write_metrics_csv(&dir.join(METRICS_FILE), &out.records)?;
    save_checkpoint(&dir.join(CHECKPOINT_DIR), &out.model.ema, &cfg.classifier)?;
    write_confusion(&dir.join(CONFUSION_FILE), &out.evaluation)?;
    let marker = dir.join(DONE_MARKER);
    fs::write(&marker, "").map_err(|e| Error::io(&marker, e))?;
    Ok(SslRun {
        accuracy: final_accuracy(&out.records, dir)?,
        records: out.records,
        resumed: false,
    })
}

fn write_confusion(path: &Path, eval: &Evaluation) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(eval)? + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn final_accuracy(records: &[RunRecord], dir: &Path) -> Result<f64> {
    records.last().map(|r| r.test_accuracy).ok_or_else(|| Error::Format {
        what: "metrics csv",
        detail: format!("{}: no rows", dir.join(METRICS_FILE).display()),
    })
}
