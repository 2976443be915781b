//! `sindecay` command-line entry point.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sindecay::datagen::PoolKind;
use sindecay::harness::{self, Config, ExperimentName};
use sindecay::schedulers::ScheduleConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "sindecay", version, about = "Semi-supervised training with sinusoidal threshold decay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labeled/unlabeled/test bundle.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
    },
    /// Fit the denoiser on the clean real unlabeled pool.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        /// Override `diffusion.train.train_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draw a synthetic unlabeled pool from a denoiser checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train-diffusion`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        num_samples: Option<usize>,
    },
    /// One SSL (or supervised-only) training run.
    TrainSsl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        /// Override the threshold schedule kind (fixed, linear_decay,
        /// sinusoidal_decay, adaptive_ascent) with its defaults.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        lambda_u: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Run an experiment grid and write its summary.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataFlags,
        /// ablation_thresholds, pool_comparison or baseline_vs_ssl.
        #[arg(long)]
        name: String,
        /// Comma-separated seeds, e.g. `1,2,3`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Rebuild summary and trace files for an experiment directory.
    Report {
        /// Experiment directory (`<out_dir>/<experiment>`).
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataFlags {
    /// real_clean, real_biased or synthetic.
    #[arg(long)]
    pool_kind: Option<String>,
    /// Synthetic pool file or directory.
    #[arg(long)]
    pool_path: Option<PathBuf>,
    #[arg(long)]
    n_unlabeled: Option<usize>,
    #[arg(long)]
    n_labeled_per_class: Option<usize>,
}

impl DataFlags {
    fn apply(&self, cfg: &mut Config) -> sindecay::Result<()> {
        if let Some(k) = &self.pool_kind {
            cfg.data.pool_kind = k.parse::<PoolKind>()?;
        }
        if let Some(p) = &self.pool_path {
            cfg.data.pool_path = Some(p.clone());
        }
        if let Some(n) = self.n_unlabeled {
            cfg.data.n_unlabeled = n;
        }
        if let Some(n) = self.n_labeled_per_class {
            cfg.data.n_labeled_per_class = n;
        }
        Ok(())
    }
}

fn load(common: &Common) -> sindecay::Result<Config> {
    match &common.config {
        Some(path) => Config::load(path),
        None => Ok(Config::default()),
    }
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn parse_schedule(kind: &str) -> sindecay::Result<ScheduleConfig> {
    Ok(match kind {
        "fixed" => ScheduleConfig::fixed(),
        "linear_decay" => ScheduleConfig::linear_decay(),
        "sinusoidal_decay" => ScheduleConfig::default(),
        "adaptive_ascent" => ScheduleConfig::adaptive_ascent(),
        other => return Err(sindecay::Error::Config(format!("unknown schedule `{other}`"))),
    })
}

fn print_json(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
}

fn run(cli: Cli) -> sindecay::Result<()> {
    match cli.command {
        Command::GenData { common, data } => {
            let mut cfg = load(&common)?;
            data.apply(&mut cfg)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            let dir = out_dir(&common, "data");
            let b = harness::gen_data(&cfg, &dir)?;
            print_json(serde_json::json!({
                "out": dir,
                "labeled": b.labeled.len(),
                "unlabeled": b.unlabeled.len(),
                "test": b.test.len(),
            }));
        }
        Command::TrainDiffusion { common, steps } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
                cfg.diffusion.train.seed = s;
            }
            if let Some(n) = steps {
                cfg.diffusion.train.train_steps = n;
            }
            cfg.validate()?;
            let r = harness::train_diffusion(&cfg, &out_dir(&common, "diffusion"))?;
            print_json(serde_json::to_value(&r)?);
        }
        Command::Sample {
            common,
            checkpoint,
            num_samples,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.diffusion.sampler.seed = s;
            }
            if let Some(n) = num_samples {
                cfg.diffusion.sampler.num_samples = n;
            }
            cfg.validate()?;
            let pool = harness::sample_pool(&cfg, &checkpoint, &out_dir(&common, "pool"))?;
            print_json(serde_json::json!({ "pool": pool }));
        }
        Command::TrainSsl {
            common,
            data,
            schedule,
            lambda_u,
            iterations,
        } => {
            let mut cfg = load(&common)?;
            data.apply(&mut cfg)?;
            if let Some(k) = schedule {
                cfg.schedule = parse_schedule(&k)?;
            }
            if let Some(l) = lambda_u {
                cfg.train.lambda_u = l;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            if let Some(s) = common.seed {
                cfg = cfg.for_seed(s);
            }
            cfg.validate()?;
            let dir = out_dir(&common, "run");
            let r = harness::run_ssl(&cfg, &dir)?;
            print_json(serde_json::json!({
                "out": dir,
                "test_accuracy": r.accuracy,
                "resumed": r.resumed,
            }));
        }
        Command::Experiment {
            common,
            data,
            name,
            seeds,
            iterations,
        } => {
            let mut cfg = load(&common)?;
            data.apply(&mut cfg)?;
            let name: ExperimentName = name.parse()?;
            if let Some(s) = seeds {
                cfg.experiment.seeds = s;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            if common.seed.is_some() {
                return Err(sindecay::Error::Config("experiment takes --seeds, not --seed".into()));
            }
            if let Some(o) = common.out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            let rows = harness::run_experiment(&cfg, name, &cfg.out_dir)?;
            print_rows(&rows);
        }
        Command::Report { dir } => {
            let r = harness::report(&dir)?;
            print_rows(&r.summary);
        }
    }
    Ok(())
}

fn print_rows(rows: &[harness::SummaryRow]) {
    for r in rows {
        println!(
            "{:<24} {:>7.2}% ± {:>5.2}  seeds {:?}",
            r.cell,
            100.0 * r.mean_accuracy,
            100.0 * r.std_accuracy,
            r.seeds
        );
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
