use std::path::Path;

use serde::{Deserialize, Serialize};

use super::augment::AugmentationSpec;
use super::consistency_loss;
use crate::datagen::{DatasetBundle, Split};
use crate::models::{classifier_forward, predict_probs, ClassifierConfig, ModelParams};
use crate::numerics::{seeded_rng, Graph, SgdState, Tensor};
use crate::schedulers::{IterationClock, ThresholdSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub labeled_batch: usize,
    /// Unlabeled batch = `labeled_batch · mu`.
    pub mu: usize,
    pub lambda_u: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            labeled_batch: 8,
            mu: 4,
            lambda_u: 1.0,
            iterations: 5000,
            learning_rate: 0.03,
            momentum: 0.9,
            ema_decay: 0.999,
            seed: 0,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn unlabeled_batch(&self) -> usize {
        self.labeled_batch * self.mu
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled_batch == 0 || self.mu == 0 || self.eval_every == 0 {
            return Err(Error::Config("labeled_batch, mu and eval_every must be positive".into()));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::Config(format!("lambda_u must be nonnegative, got {}", self.lambda_u)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0,1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Student weights, their EMA, and optimizer state.
#[derive(Debug, Clone)]
pub struct SslModel {
    pub config: ClassifierConfig,
    pub params: ModelParams,
    pub ema: ModelParams,
    pub sgd: SgdState,
    ema_decay: f64,
    updates: u64,
}

impl SslModel {
    pub fn new(config: ClassifierConfig, params: ModelParams, train: &TrainConfig) -> Result<Self> {
        Ok(Self {
            ema: params.detached(),
            params,
            config,
            sgd: SgdState::new(train.learning_rate, train.momentum)?,
            ema_decay: train.ema_decay,
            updates: 0,
        })
    }

    /// EMA with the usual warm-up `min(decay, (1 + n)/(10 + n))`, so short
    /// runs are not dominated by the initialization.
    fn update_ema(&mut self) -> Result<()> {
        let n = self.updates as f64;
        let decay = self.ema_decay.min((1.0 + n) / (10.0 + n));
        self.updates += 1;
        self.ema.ema_update(&self.params, decay)
    }
}

/// One iteration's inputs. The unlabeled views are empty for
/// supervised-only steps.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub labeled: Tensor,
    pub targets: Vec<usize>,
    pub unlabeled_weak: Option<Tensor>,
    pub unlabeled_strong: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub mask_rate: f64,
    pub threshold: f64,
}

/// One SGD step with the schedule's threshold for `clock` (the adaptive
/// schedule first absorbs the weak-view confidences of this batch).
pub fn train_step(
    model: &mut SslModel,
    batch: &StepBatch,
    schedule: &mut ThresholdSchedule,
    clock: IterationClock,
    lambda_u: f64,
) -> Result<StepStats> {
    step_inner(model, batch, lambda_u, schedule.current(clock)?, |max_probs| {
        schedule.threshold_for_batch(clock, max_probs)
    })
}

/// One SGD step with a forced threshold.
pub fn train_step_with_threshold(
    model: &mut SslModel,
    batch: &StepBatch,
    threshold: f64,
    lambda_u: f64,
) -> Result<StepStats> {
    step_inner(model, batch, lambda_u, threshold, |_| Ok(threshold))
}

fn step_inner(
    model: &mut SslModel,
    batch: &StepBatch,
    lambda_u: f64,
    idle_threshold: f64,
    threshold_for: impl FnOnce(&[f64]) -> Result<f64>,
) -> Result<StepStats> {
    let k = model.config.num_classes;
    let unlabeled = match (&batch.unlabeled_weak, &batch.unlabeled_strong) {
        (Some(w), Some(s)) if lambda_u > 0.0 => Some((w, s)),
        _ => None,
    };
    // Pseudo-labels come from the student weights, outside the graph.
    let gate = match unlabeled {
        Some((weak, _)) => {
            let probs = predict_probs(&model.config, &model.params, weak)?;
            let max_probs: Vec<f64> = probs
                .chunks_exact(k)
                .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let threshold = threshold_for(&max_probs)?;
            Some((probs, threshold))
        }
        None => None,
    };

    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let x = g.constant(batch.labeled.clone());
    let logits = classifier_forward(&model.config, &mut g, &bound, x)?;
    let sup = g.softmax_cross_entropy(logits, &batch.targets)?;
    let loss_sup = g.value(sup).item()?;
    let (total, loss_unsup, mask_rate, threshold) = match (unlabeled, gate) {
        (Some((_, strong)), Some((probs, threshold))) => {
            let xs = g.constant(strong.clone());
            let strong_logits = classifier_forward(&model.config, &mut g, &bound, xs)?;
            let (unsup, mask) = consistency_loss(&mut g, &probs, strong_logits, threshold)?;
            let lu = g.value(unsup).item()?;
            let weighted = g.scale(unsup, lambda_u)?;
            (g.add(sup, weighted)?, lu, mask, threshold)
        }
        _ => (sup, 0.0, 0.0, idle_threshold),
    };
    if !(loss_sup.is_finite() && loss_unsup.is_finite()) {
        return Err(Error::Contract(format!(
            "non-finite loss (sup {loss_sup}, unsup {loss_unsup})"
        )));
    }
    g.backward(total)?;
    model.params.absorb_grads(&g, &bound)?;
    model.sgd.step(model.params.iter_mut())?;
    model.update_ema()?;
    Ok(StepStats {
        loss_sup,
        loss_unsup,
        mask_rate,
        threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Argmax accuracy of `params` on a labeled split, no augmentation.
pub fn evaluate(config: &ClassifierConfig, params: &ModelParams, test: &Split) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Contract("evaluation needs a nonempty test set".into()));
    }
    if test.labels.len() != test.len() {
        return Err(Error::Contract("evaluation split has no labels".into()));
    }
    let k = config.num_classes;
    let probs = predict_probs(config, params, &test.images)?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0;
    for (row, &label) in probs.chunks_exact(k).zip(&test.labels) {
        let pred = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > row[best] { i } else { best });
        confusion[label][pred] += 1;
        correct += usize::from(pred == label);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        confusion,
    })
}

/// One logged row of a run. Losses and mask rate are means over the steps
/// since the previous row; threshold is the value used at the logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: usize,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub mask_rate: f64,
    pub threshold: f64,
    pub test_accuracy: f64,
}

pub const METRICS_HEADER: &str = "iter,loss_sup,loss_unsup,mask_rate,threshold,test_accuracy";

pub fn write_metrics_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    if records.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(Error::Format {
            what: "metrics csv",
            detail: format!("{}: unexpected header `{header}`", path.display()),
        });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub model: SslModel,
    /// Final EMA evaluation on the test split.
    pub evaluation: Evaluation,
}

const STREAM_INIT: u64 = 0;
const STREAM_LABELED: u64 = 1 << 40;
const STREAM_UNLABELED: u64 = 2 << 40;

/// Draws iteration `i`'s batch. Labeled and unlabeled draws use separate
/// streams, so dropping the unlabeled branch leaves the labeled path
/// unchanged.
fn draw_batch(cfg: &TrainConfig, bundle: &DatasetBundle, i: usize, with_unlabeled: bool) -> Result<StepBatch> {
    let weak = AugmentationSpec::weak();
    let side = bundle.labeled.images.shape()[3];
    let per = side * side;
    let mut rng = seeded_rng(cfg.seed, STREAM_LABELED + i as u64);
    let idx: Vec<usize> = (0..cfg.labeled_batch).map(|_| rng.below(bundle.labeled.len())).collect();
    let raw = bundle.labeled.images.select_rows(&idx)?;
    let labeled = Tensor::new(raw.shape().to_vec(), weak.apply_batch(raw.data(), side, &mut rng))?;
    let targets = idx.iter().map(|&j| bundle.labeled.labels[j]).collect();
    let (unlabeled_weak, unlabeled_strong) = if with_unlabeled {
        let strong = AugmentationSpec::strong();
        let mut rng = seeded_rng(cfg.seed, STREAM_UNLABELED + i as u64);
        let bu = cfg.unlabeled_batch();
        let idx: Vec<usize> = (0..bu).map(|_| rng.below(bundle.unlabeled.len())).collect();
        let raw = bundle.unlabeled.images.select_rows(&idx)?;
        let mut w = Vec::with_capacity(bu * per);
        let mut s = Vec::with_capacity(bu * per);
        for img in raw.data().chunks_exact(per) {
            w.extend(weak.apply(img, side, &mut rng));
            s.extend(strong.apply(img, side, &mut rng));
        }
        (
            Some(Tensor::new(raw.shape().to_vec(), w)?),
            Some(Tensor::new(raw.shape().to_vec(), s)?),
        )
    } else {
        (None, None)
    };
    Ok(StepBatch {
        labeled,
        targets,
        unlabeled_weak,
        unlabeled_strong,
    })
}

/// Full training run: `cfg.iterations` steps, an EMA evaluation every
/// `cfg.eval_every` steps (and at the end), labeled and unlabeled batches
/// drawn uniformly with replacement.
pub fn train_run(
    cfg: &TrainConfig,
    model_cfg: &ClassifierConfig,
    bundle: &DatasetBundle,
    schedule: &mut ThresholdSchedule,
) -> Result<RunOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    bundle.check_disjoint()?;
    if bundle.labeled.is_empty() || bundle.test.is_empty() {
        return Err(Error::Config("training needs labeled and test data".into()));
    }
    let with_unlabeled = cfg.lambda_u > 0.0;
    if with_unlabeled && bundle.unlabeled.is_empty() {
        return Err(Error::Config("lambda_u > 0 needs a nonempty unlabeled pool".into()));
    }
    let params = model_cfg.init(&mut seeded_rng(cfg.seed, STREAM_INIT))?;
    let mut model = SslModel::new(model_cfg.clone(), params, cfg)?;
    let mut records = Vec::new();
    let mut window = (0.0, 0.0, 0.0, 0usize);
    for i in 0..cfg.iterations {
        let batch = draw_batch(cfg, bundle, i, with_unlabeled)?;
        let clock = IterationClock::new(i, cfg.iterations)?;
        let s = train_step(&mut model, &batch, schedule, clock, cfg.lambda_u)?;
        window = (window.0 + s.loss_sup, window.1 + s.loss_unsup, window.2 + s.mask_rate, window.3 + 1);
        let done = i + 1;
        if done % cfg.eval_every == 0 || done == cfg.iterations {
            let n = window.3 as f64;
            let eval = evaluate(model_cfg, &model.ema, &bundle.test)?;
            records.push(RunRecord {
                iter: done,
                loss_sup: window.0 / n,
                loss_unsup: window.1 / n,
                mask_rate: window.2 / n,
                threshold: s.threshold,
                test_accuracy: eval.accuracy,
            });
            window = (0.0, 0.0, 0.0, 0);
        }
    }
    let evaluation = evaluate(model_cfg, &model.ema, &bundle.test)?;
    Ok(RunOutput {
        records,
        model,
        evaluation,
    })
}
