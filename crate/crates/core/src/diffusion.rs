//! Minimal DDPM: linear noise schedule, forward corruption, ε-prediction
//! loss, ancestral sampling and denoiser training.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::models::{denoiser_forward, Bound, DenoiserConfig, ModelParams};
use crate::numerics::{seeded_rng, tnsr, Graph, RngStream, SgdState, Tensor, Var};
use crate::{Error, Result};

/// Per-step coefficients `β_t`, `α_t = 1 − β_t`, `ᾱ_t = Π_{s≤t} α_s` for
/// `t = 1..=T` (stored at index `t − 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 400,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl DiffusionSchedule {
    /// `β_t` evenly spaced from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let ordered = if steps == 1 {
            beta_start <= beta_end
        } else {
            beta_start < beta_end
        };
        if !(beta_start > 0.0 && beta_end < 1.0 && ordered) {
            return Err(Error::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|k| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!("diffusion step {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        mix(self.alpha_bar(t)?, x0, eps)
    }

    /// Recovers `x0` from `x_t` given the noise that produced it.
    pub fn invert_with_oracle(&self, x_t: &Tensor, t: usize, eps_true: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        if x_t.shape() != eps_true.shape() {
            return Err(Error::dim("invert_with_oracle", x_t.shape(), eps_true.shape()));
        }
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x_t
            .data()
            .iter()
            .zip(eps_true.data())
            .map(|(x, e)| (x - n * e) / s)
            .collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }
}

/// Forward mixing for an explicit `ᾱ`.
pub fn mix(alpha_bar: f64, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::dim("q_sample", x0.shape(), eps.shape()));
    }
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| s * x + n * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Anything that can predict the noise in `x_t` inside a graph.
pub trait NoisePredictor {
    fn predict(&self, g: &mut Graph, x_t: Var, steps: &[usize]) -> Result<Var>;
}

/// A denoiser whose parameters are already bound into the graph (training).
pub struct BoundDenoiser<'a> {
    pub config: &'a DenoiserConfig,
    pub bound: &'a Bound,
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict(&self, g: &mut Graph, x_t: Var, steps: &[usize]) -> Result<Var> {
        denoiser_forward(self.config, g, self.bound, x_t, steps)
    }
}

/// A frozen denoiser that binds its parameters into each graph it is asked
/// to extend (sampling).
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ModelParams,
}

impl NoisePredictor for Denoiser {
    fn predict(&self, g: &mut Graph, x_t: Var, steps: &[usize]) -> Result<Var> {
        let bound = self.params.bind(g, false);
        denoiser_forward(&self.config, g, &bound, x_t, steps)
    }
}

/// Noise-prediction loss: per item draw `t ~ U{1..T}` and `eps ~ N(0, I)`,
/// then average `(eps − ε̂(x_t, t))²` over every element of the batch.
pub fn diffusion_loss(
    g: &mut Graph,
    predictor: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    rng: &mut RngStream,
) -> Result<Var> {
    let n = *x0
        .shape()
        .first()
        .ok_or_else(|| Error::Contract("diffusion_loss needs a batch axis".into()))?;
    let per = if n == 0 { 0 } else { x0.numel() / n };
    let mut steps = Vec::with_capacity(n);
    let mut x_t = Vec::with_capacity(x0.numel());
    let mut eps = Vec::with_capacity(x0.numel());
    for item in x0.data().chunks_exact(per.max(1)).take(n) {
        let t = 1 + rng.below(schedule.steps());
        let ab = schedule.alpha_bar(t)?;
        let (s, q) = (ab.sqrt(), (1.0 - ab).sqrt());
        for &x in item {
            let e = rng.normal();
            eps.push(e);
            x_t.push(s * x + q * e);
        }
        steps.push(t);
    }
    let xv = g.constant(Tensor::new(x0.shape().to_vec(), x_t)?);
    let ev = g.constant(Tensor::new(x0.shape().to_vec(), eps)?);
    let pred = predictor.predict(g, xv, &steps)?;
    g.mse(pred, ev)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_t² = β_t`.
    #[default]
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_samples: usize,
    pub batch: usize,
    pub sigma_mode: SigmaMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_samples: 6000,
            batch: 250,
            sigma_mode: SigmaMode::Beta,
            seed: 0,
        }
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`, clipped to
/// `[−1, 1]`. Batch `b` draws from stream `b` of `seed`, and batches are
/// concatenated in stream order, so the output depends only on
/// `(predictor, schedule, n, item_shape, batch, seed)`.
pub fn ancestral_sample(
    predictor: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    n: usize,
    item_shape: &[usize],
    batch: usize,
    seed: u64,
) -> Result<Tensor> {
    if batch == 0 {
        return Err(Error::Config("sampling batch must be positive".into()));
    }
    let per: usize = item_shape.iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(item_shape);
    let mut out = Vec::with_capacity(n * per);
    for (b, start) in (0..n).step_by(batch).enumerate() {
        let nb = batch.min(n - start);
        let mut rng = seeded_rng(seed, b as u64);
        let mut item = vec![nb];
        item.extend_from_slice(item_shape);
        let mut x = Tensor::new(item.clone(), rng.normals(nb * per))?;
        for t in (1..=schedule.steps()).rev() {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let eps_hat = predictor.predict(&mut g, xv, &vec![t; nb])?;
            let eps_hat = g.value(eps_hat);
            if eps_hat.shape() != x.shape() {
                return Err(Error::dim("ancestral_sample", x.shape(), eps_hat.shape()));
            }
            let (alpha, beta, ab) = (schedule.alpha(t)?, schedule.beta(t)?, schedule.alpha_bar(t)?);
            let coef = beta / (1.0 - ab).sqrt();
            let inv = 1.0 / alpha.sqrt();
            let sigma = beta.sqrt();
            let next: Vec<f64> = x
                .data()
                .iter()
                .zip(eps_hat.data())
                .map(|(&xv, &e)| {
                    let mean = inv * (xv - coef * e);
                    if t > 1 {
                        mean + sigma * rng.normal()
                    } else {
                        mean
                    }
                })
                .collect();
            x = Tensor::new(item.clone(), next)?;
        }
        out.extend(x.data().iter().map(|v| v.clamp(-1.0, 1.0)));
    }
    Tensor::new(shape, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub train_steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Wall-clock cap; training stops early (non-reproducibly) once exceeded.
    pub max_seconds: Option<f64>,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            train_steps: 8000,
            batch: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            ema_decay: 0.995,
            seed: 0,
            max_seconds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserTraining {
    /// EMA weights, used for sampling.
    pub params: ModelParams,
    /// Mean loss per block of 100 steps.
    pub loss_trace: Vec<f64>,
    pub steps_done: usize,
    pub seconds: f64,
}

const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1 << 40;
const STREAM_NOISE: u64 = 2 << 40;

/// Fits an ε-predictor on `pool` (`N×C×H×W`, values in `[−1, 1]`) with SGD
/// and keeps an EMA copy of the weights.
pub fn train_denoiser(
    cfg: &DiffusionTrainConfig,
    model: &DenoiserConfig,
    schedule: &DiffusionSchedule,
    pool: &Tensor,
) -> Result<DenoiserTraining> {
    model.validate()?;
    if model.max_timestep != schedule.steps() {
        return Err(Error::Config(format!(
            "denoiser max_timestep {} does not match schedule T = {}",
            model.max_timestep,
            schedule.steps()
        )));
    }
    let n = pool.shape().first().copied().unwrap_or(0);
    if n == 0 || cfg.batch == 0 {
        return Err(Error::Config("denoiser training needs a nonempty pool and batch".into()));
    }
    let started = Instant::now();
    let mut params = model.init(&mut seeded_rng(cfg.seed, STREAM_INIT))?;
    let mut ema = params.detached();
    let mut sgd = SgdState::new(cfg.learning_rate, cfg.momentum)?;
    let mut trace = Vec::new();
    let mut window = 0.0;
    let mut done = 0;
    for step in 0..cfg.train_steps {
        if let Some(limit) = cfg.max_seconds {
            if started.elapsed().as_secs_f64() > limit {
                break;
            }
        }
        let mut pick = seeded_rng(cfg.seed, STREAM_BATCH + step as u64);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| pick.below(n)).collect();
        let x0 = pool.select_rows(&idx)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let net = BoundDenoiser {
            config: model,
            bound: &bound,
        };
        let mut noise = seeded_rng(cfg.seed, STREAM_NOISE + step as u64);
        let loss = diffusion_loss(&mut g, &net, schedule, &x0, &mut noise)?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Contract(format!("denoiser loss diverged at step {step}")));
        }
        g.backward(loss)?;
        params.absorb_grads(&g, &bound)?;
        sgd.step(params.iter_mut())?;
        ema.ema_update(&params, cfg.ema_decay)?;
        window += lv;
        done = step + 1;
        if done % 100 == 0 {
            trace.push(window / 100.0);
            window = 0.0;
        }
    }
    Ok(DenoiserTraining {
        params: ema,
        loss_trace: trace,
        steps_done: done,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub const POOL_FILE: &str = "pool_synthetic.tnsr";
pub const POOL_META_FILE: &str = "pool_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMeta {
    pub count: usize,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub denoiser_checkpoint_sha256: String,
}

pub fn save_pool(dir: &Path, samples: &Tensor, meta: &PoolMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tnsr::write(dir.join(POOL_FILE), samples)?;
    let path = dir.join(POOL_META_FILE);
    fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&path, e))
}

/// Loads a pool from either the `.tnsr` file itself or its directory.
pub fn load_pool(path: &Path) -> Result<Tensor> {
    let file = if path.is_dir() {
        path.join(POOL_FILE)
    } else {
        path.to_path_buf()
    };
    tnsr::read(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(&self, g: &mut Graph, x_t: Var, _: &[usize]) -> Result<Var> {
            Ok(g.constant(Tensor::zeros(g.shape(x_t).to_vec())))
        }
    }

    #[test]
    fn schedule_shape_and_product_identity() {
        let s = ScheduleParams::default().build().unwrap();
        assert_eq!(s.steps(), 400);
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(400).unwrap() - 0.02).abs() < 1e-15);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        let mut log_sum = 0.0;
        for t in 1..=400 {
            log_sum += s.alpha(t).unwrap().ln();
            assert!((s.alpha_bar(t).unwrap() - log_sum.exp()).abs() < 1e-12);
        }
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(401).is_err());
        assert!(DiffusionSchedule::linear(10, 0.02, 1e-4).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = ScheduleParams::default().build().unwrap();
        let x0 = Tensor::from_fn([2, 3], |i| i as f64 - 2.0);
        let zero = Tensor::zeros([2, 3]);
        let xt = s.q_sample(&x0, 100, &zero).unwrap();
        let k = s.alpha_bar(100).unwrap().sqrt();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - k * b).abs() < 1e-15);
        }
        let eps = Tensor::from_fn([2, 3], |i| (i as f64).sin());
        assert_eq!(mix(1.0, &x0, &eps).unwrap(), x0);
        assert!(s.q_sample(&x0, 1, &Tensor::zeros([3, 2])).is_err());
    }

    #[test]
    fn inversion_recovers_x0() {
        let s = ScheduleParams::default().build().unwrap();
        let mut rng = seeded_rng(9, 0);
        let x0 = Tensor::from_fn([1, 1, 32, 32], |_| rng.uniform_in(-1.0, 1.0));
        let eps = Tensor::from_fn([1, 1, 32, 32], |_| rng.normal());
        for t in [1, 200, 400] {
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let back = s.invert_with_oracle(&xt, t, &eps).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() <= 1e-9);
        }
        let zero = Tensor::zeros([1, 1, 32, 32]);
        let xt = s.q_sample(&x0, 7, &zero).unwrap();
        let back = s.invert_with_oracle(&xt, 7, &zero).unwrap();
        let k = s.alpha_bar(7).unwrap().sqrt();
        for (b, x) in back.data().iter().zip(xt.data()) {
            assert!((b - x / k).abs() < 1e-12);
        }
        assert!(matches!(s.invert_with_oracle(&xt, 0, &zero), Err(Error::Index(_))));
    }

    #[test]
    fn zero_predictor_loss_is_unit() {
        let s = ScheduleParams::default().build().unwrap();
        let x0 = Tensor::zeros([10_000, 1]);
        let mut g = Graph::new();
        let loss = diffusion_loss(&mut g, &Zero, &s, &x0, &mut seeded_rng(3, 3)).unwrap();
        let v = g.value(loss).item().unwrap();
        assert!((v - 1.0).abs() < 0.02, "{v}");
    }

    #[test]
    fn sampling_edge_cases() {
        let s = DiffusionSchedule::linear(5, 1e-3, 0.2).unwrap();
        let empty = ancestral_sample(&Zero, &s, 0, &[1, 4, 4], 8, 0).unwrap();
        assert_eq!(empty.shape(), &[0, 1, 4, 4]);
        let a = ancestral_sample(&Zero, &s, 5, &[1, 4, 4], 2, 11).unwrap();
        let b = ancestral_sample(&Zero, &s, 5, &[1, 4, 4], 2, 11).unwrap();
        assert_eq!(a.shape(), &[5, 1, 4, 4]);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn tiny_denoiser_training_reduces_loss() {
        let model = DenoiserConfig {
            base_channels: 2,
            depth: 1,
            time_embed_dim: 4,
            height: 4,
            width: 4,
            max_timestep: 20,
            ..Default::default()
        };
        let schedule = DiffusionSchedule::linear(20, 1e-3, 0.2).unwrap();
        let pool = Tensor::from_fn([16, 1, 4, 4], |i| if (i / 4) % 2 == 0 { 0.8 } else { -0.8 });
        let cfg = DiffusionTrainConfig {
            train_steps: 400,
            batch: 8,
            learning_rate: 0.02,
            ..Default::default()
        };
        let out = train_denoiser(&cfg, &model, &schedule, &pool).unwrap();
        assert_eq!(out.steps_done, 400);
        assert_eq!(out.loss_trace.len(), 4);
        assert!(out.loss_trace[3] < out.loss_trace[0], "{:?}", out.loss_trace);
    }
}
