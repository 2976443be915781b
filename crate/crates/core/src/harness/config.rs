use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{BundleSpec, PoolKind};
use crate::diffusion::{DiffusionTrainConfig, SamplerConfig, ScheduleParams};
use crate::models::{ClassifierConfig, DenoiserConfig};
use crate::schedulers::ScheduleConfig;
use crate::ssl::TrainConfig;
use crate::{Error, Result};

/// Everything the CLI and the experiment recipes need. Every field has a
/// default, so a config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root for experiment outputs (`<out_dir>/<experiment>/...`).
    pub out_dir: PathBuf,
    pub data: BundleSpec,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub diffusion: DiffusionSection,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    pub train: DiffusionTrainConfig,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    AblationThresholds,
    PoolComparison,
    BaselineVsSsl,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 3] = [
        ExperimentName::AblationThresholds,
        ExperimentName::PoolComparison,
        ExperimentName::BaselineVsSsl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::AblationThresholds => "ablation_thresholds",
            ExperimentName::PoolComparison => "pool_comparison",
            ExperimentName::BaselineVsSsl => "baseline_vs_ssl",
        }
    }
}

impl std::str::FromStr for ExperimentName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: Option<ExperimentName>,
    pub seeds: Vec<u64>,
    /// Labeled images per class for the pool comparison grid.
    pub labeled_sizes: Vec<usize>,
    pub pool_kinds: Vec<PoolKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            seeds: vec![1, 2, 3],
            labeled_sizes: vec![30, 21, 15, 6],
            pool_kinds: PoolKind::ALL.to_vec(),
        }
    }
}

impl Config {
    /// Desk-scale settings used for the reference experiments: a slimmer
    /// classifier and denoiser than the library defaults, and a renderer
    /// noisy enough that thirty labels leave room for unlabeled data to
    /// help.
    pub fn reference() -> Self {
        let mut cfg = Config::default();
        cfg.classifier.widths = vec![8, 16, 32];
        cfg.classifier.blocks_per_stage = 1;
        cfg.data.render.pixel_noise = 0.5;
        cfg.diffusion.denoiser = DenoiserConfig {
            base_channels: 4,
            depth: 3,
            time_embed_dim: 16,
            ..Default::default()
        };
        cfg.diffusion.train.train_steps = 8000;
        cfg.diffusion.train.learning_rate = 0.05;
        cfg.diffusion.sampler.batch = 32;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.train.validate()?;
        self.schedule.build(self.classifier.num_classes)?.validate()?;
        self.diffusion.denoiser.validate()?;
        self.diffusion.schedule.build()?;
        if self.diffusion.denoiser.max_timestep != self.diffusion.schedule.steps {
            return Err(Error::Config(format!(
                "diffusion.denoiser.max_timestep ({}) must equal diffusion.schedule.steps ({})",
                self.diffusion.denoiser.max_timestep, self.diffusion.schedule.steps
            )));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds is empty".into()));
        }
        Ok(())
    }

    /// Reads a JSON config. Any failure, including a missing file, is a
    /// configuration error naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes the effective config as pretty JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// The per-run view: training and data seeds follow the run seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.train.seed = seed;
        cfg.data.seed = seed;
        cfg
    }
}
