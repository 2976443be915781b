use std::path::Path;

use super::config::{Config, ExperimentName};
use super::pipeline::{run_ssl, CONFIG_FILE};
use super::report::{report, SummaryRow};
use crate::datagen::PoolKind;
use crate::schedulers::ScheduleConfig;
use crate::{Error, Result};

/// One grid cell: a label and the fully specified config its runs use
/// (before the per-seed override).
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub config: Config,
}

/// Expands an experiment into its cells.
///
/// - `ablation_thresholds`: one cell per threshold schedule.
/// - `pool_comparison`: `pool_kinds × labeled_sizes` (per class).
/// - `baseline_vs_ssl`: supervised-only (`lambda_u = 0`) and SSL with
///   sinusoidal decay.
pub fn grid(cfg: &Config, name: ExperimentName) -> Result<Vec<Cell>> {
    let with = |label: String, f: &dyn Fn(&mut Config)| {
        let mut c = cfg.clone();
        f(&mut c);
        Cell { label, config: c }
    };
    let cells = match name {
        ExperimentName::AblationThresholds => [
            ScheduleConfig::fixed(),
            ScheduleConfig::adaptive_ascent(),
            ScheduleConfig::linear_decay(),
            ScheduleConfig::default(),
        ]
        .into_iter()
        .map(|s| with(s.kind().to_string(), &|c| c.schedule = s.clone()))
        .collect(),
        ExperimentName::PoolComparison => {
            if cfg.experiment.pool_kinds.contains(&PoolKind::Synthetic) && cfg.data.pool_path.is_none() {
                return Err(Error::Missing(
                    "pool_comparison includes the synthetic pool but data.pool_path is unset; \
                     run `train-diffusion` and `sample` first, then pass --pool-path"
                        .into(),
                ));
            }
            let mut cells = Vec::new();
            for &kind in &cfg.experiment.pool_kinds {
                for &n in &cfg.experiment.labeled_sizes {
                    cells.push(with(format!("{}_{n}", kind.as_str()), &|c| {
                        c.data.pool_kind = kind;
                        c.data.n_labeled_per_class = n;
                    }));
                }
            }
            cells
        }
        ExperimentName::BaselineVsSsl => vec![
            with("supervised_only".into(), &|c| c.train.lambda_u = 0.0),
            with("ssl_sinusoidal_decay".into(), &|c| c.schedule = ScheduleConfig::default()),
        ],
    };
    Ok(cells)
}

/// Runs every cell × seed under `<root>/<name>/<cell>/<seed>/` (skipping
/// finished runs) and writes the experiment's summary files.
pub fn run_experiment(cfg: &Config, name: ExperimentName, root: &Path) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let cells = grid(cfg, name)?;
    let dir = root.join(name.as_str());
    let mut effective = cfg.clone();
    effective.experiment.name = Some(name);
    effective.save(&dir.join(CONFIG_FILE))?;
    for cell in &cells {
        for &seed in &cfg.experiment.seeds {
            run_ssl(&cell.config.for_seed(seed), &dir.join(&cell.label).join(seed.to_string()))?;
        }
    }
    let out = report(&dir)?;
    // The report sees whatever is on disk; make sure that is this grid.
    let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
    for label in &labels {
        if !out.summary.iter().any(|r| r.cell == *label) {
            return Err(Error::Contract(format!("cell `{label}` missing from the report")));
        }
    }
    Ok(out.summary.into_iter().filter(|r| labels.contains(&r.cell.as_str())).collect())
}
