use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::config::Config;
use super::pipeline::{final_accuracy, CONFIG_FILE, DONE_MARKER, METRICS_FILE};
use crate::schedulers::{IterationClock, ScheduleConfig};
use crate::ssl::{read_metrics_csv, RunRecord};
use crate::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const THRESHOLD_TRACE_FILE: &str = "threshold_trace.csv";
pub const MASK_RATE_TRACE_FILE: &str = "mask_rate_trace.csv";
pub const SUMMARY_HEADER: &str = "experiment,cell,mean_accuracy,std_accuracy,seeds";

/// Mean and sample standard deviation of final test accuracy for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub cell: String,
    pub mean_accuracy: f64,
    /// Sample (n − 1) standard deviation; 0 for a single seed.
    pub std_accuracy: f64,
    pub seeds: Vec<u64>,
}

/// A finished run as read back from disk.
#[derive(Debug, Clone)]
pub struct RunEntry {
    pub cell: String,
    pub seed: u64,
    pub config: Config,
    pub records: Vec<RunRecord>,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<RunEntry>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every finished run under `<dir>/<cell>/<seed>/`.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunEntry>> {
    let mut runs = Vec::new();
    for (cell, cell_dir) in sorted_subdirs(dir)? {
        let mut seeds: Vec<(u64, PathBuf)> = sorted_subdirs(&cell_dir)?
            .into_iter()
            .filter_map(|(name, p)| name.parse().ok().map(|s| (s, p)))
            .filter(|(_, p)| p.join(DONE_MARKER).is_file())
            .collect();
        seeds.sort();
        for (seed, run_dir) in seeds {
            let config = Config::load(&run_dir.join(CONFIG_FILE))?;
            let records = read_metrics_csv(&run_dir.join(METRICS_FILE))?;
            let accuracy = final_accuracy(&records, &run_dir)?;
            runs.push(RunEntry {
                cell: cell.clone(),
                seed,
                config,
                records,
                accuracy,
            });
        }
    }
    Ok(runs)
}

/// Summarizes an experiment directory and writes `summary.csv`,
/// `threshold_trace.csv` and `mask_rate_trace.csv` into it. Every value is
/// recomputed from the per-run files.
pub fn report(dir: &Path) -> Result<Report> {
    if !dir.is_dir() {
        return Err(Error::Missing(format!("{} is not a directory", dir.display())));
    }
    let runs = collect_runs(dir)?;
    if runs.is_empty() {
        return Err(Error::Missing(format!("no completed runs under {}", dir.display())));
    }
    let experiment = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let summary = summarize(&experiment, &runs);
    write_summary(&dir.join(SUMMARY_FILE), &summary)?;
    write_threshold_trace(&dir.join(THRESHOLD_TRACE_FILE), &runs)?;
    write_mask_rate_trace(&dir.join(MASK_RATE_TRACE_FILE), &runs)?;
    Ok(Report { summary, runs })
}

fn summarize(experiment: &str, runs: &[RunEntry]) -> Vec<SummaryRow> {
    let mut by_cell: BTreeMap<&str, Vec<&RunEntry>> = BTreeMap::new();
    for r in runs {
        by_cell.entry(&r.cell).or_default().push(r);
    }
    by_cell
        .into_iter()
        .map(|(cell, rs)| {
            let accs: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let (mean, std) = mean_std(&accs);
            SummaryRow {
                experiment: experiment.to_string(),
                cell: cell.to_string(),
                mean_accuracy: mean,
                std_accuracy: std,
                seeds: rs.iter().map(|r| r.seed).collect(),
            }
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_HEADER.split(','))?;
    for r in rows {
        let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        w.write_record([
            r.experiment.clone(),
            r.cell.clone(),
            r.mean_accuracy.to_string(),
            r.std_accuracy.to_string(),
            seeds,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a `summary.csv` back into rows.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let bad = |detail: String| Error::Format {
        what: "summary csv",
        detail: format!("{}: {detail}", path.display()),
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(e.to_string()));
        let seeds = rec[4]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u64>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_>>()?;
        rows.push(SummaryRow {
            experiment: rec[0].to_string(),
            cell: rec[1].to_string(),
            mean_accuracy: num(2)?,
            std_accuracy: num(3)?,
            seeds,
        });
    }
    Ok(rows)
}

/// Wide table `iter,<schedule>...`, one column per distinct schedule among
/// runs that use unlabeled data. Stateless schedules are evaluated at every
/// `i ∈ [0, i_max]`; the adaptive schedule only has the seed-mean of its
/// logged thresholds.
fn write_threshold_trace(path: &Path, runs: &[RunEntry]) -> Result<()> {
    enum Column {
        Analytic(ScheduleConfig, usize),
        Logged(BTreeMap<usize, Vec<f64>>),
    }
    let mut columns: BTreeMap<&'static str, Column> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.config.train.lambda_u > 0.0) {
        let s = &r.config.schedule;
        match s {
            ScheduleConfig::AdaptiveAscent { .. } => {
                let col = columns.entry(s.kind()).or_insert_with(|| Column::Logged(BTreeMap::new()));
                if let Column::Logged(m) = col {
                    for rec in &r.records {
                        m.entry(rec.iter).or_default().push(rec.threshold);
                    }
                }
            }
            _ => {
                columns
                    .entry(s.kind())
                    .or_insert_with(|| Column::Analytic(s.clone(), r.config.train.iterations));
            }
        }
    }
    let mut iters = BTreeSet::new();
    for col in columns.values() {
        match col {
            Column::Analytic(_, i_max) => iters.extend(0..=*i_max),
            Column::Logged(m) => iters.extend(m.keys().copied()),
        }
    }
    let mut w = csv_writer(path)?;
    let mut header = vec!["iter".to_string()];
    header.extend(columns.keys().map(|k| k.to_string()));
    w.write_record(&header)?;
    for &i in &iters {
        let mut row = vec![i.to_string()];
        for col in columns.values() {
            let cell = match col {
                Column::Analytic(s, i_max) if i <= *i_max => {
                    let sched = s.build(3)?;
                    sched.threshold_at(IterationClock::new(i, *i_max)?)?.to_string()
                }
                Column::Analytic(..) => String::new(),
                Column::Logged(m) => m.get(&i).map(|v| mean_std(v).0.to_string()).unwrap_or_default(),
            };
            row.push(cell);
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Wide table `iter,<cell>...` of seed-mean mask rates at logged iterations.
fn write_mask_rate_trace(path: &Path, runs: &[RunEntry]) -> Result<()> {
    let mut cols: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in runs {
        let col = cols.entry(&r.cell).or_default();
        for rec in &r.records {
            col.entry(rec.iter).or_default().push(rec.mask_rate);
        }
    }
    let iters: BTreeSet<usize> = cols.values().flat_map(|m| m.keys().copied()).collect();
    let mut w = csv_writer(path)?;
    let mut header = vec!["iter".to_string()];
    header.extend(cols.keys().map(|k| k.to_string()));
    w.write_record(&header)?;
    for &i in &iters {
        let mut row = vec![i.to_string()];
        row.extend(cols.values().map(|m| m.get(&i).map(|v| mean_std(v).0.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_uses_sample_variance() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn empty_directory_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(dir.path()), Err(Error::Missing(_))));
    }
}
