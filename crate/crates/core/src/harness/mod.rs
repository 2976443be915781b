//! Configuration, the three experiment recipes and their reports.
//!
//! Output layout: `<out_dir>/<experiment>/<cell>/<seed>/` holds one run
//! (`metrics.csv`, `config.json`, `confusion.json`, `checkpoint/`,
//! `done.marker`); `<out_dir>/<experiment>/` holds `summary.csv`,
//! `threshold_trace.csv` and `mask_rate_trace.csv`.

mod config;
mod experiment;
mod pipeline;
mod report;

pub use config::{Config, DiffusionSection, ExperimentConfig, ExperimentName};
pub use experiment::{grid, run_experiment, Cell};
pub use pipeline::{
    gen_data, run_ssl, sample_pool, train_diffusion, DiffusionRun, SslRun, CHECKPOINT_DIR, CONFIG_FILE,
    CONFUSION_FILE, DENOISER_DIR, DENOISER_LOSS_FILE, DONE_MARKER, METRICS_FILE,
};
pub use report::{
    collect_runs, mean_std, read_summary, report, Report, RunEntry, SummaryRow, MASK_RATE_TRACE_FILE,
    SUMMARY_FILE, SUMMARY_HEADER, THRESHOLD_TRACE_FILE,
};
