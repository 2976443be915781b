use serde::{Deserialize, Serialize};

use super::params::{Bound, ModelParams};
use crate::numerics::{softmax_rows, Graph, RngStream, Tensor, Var};
use crate::{Error, Result};

/// Residual CNN classifier configuration.
///
/// Layout: a 3×3 stem at full resolution, then one stage per entry of
/// `widths`, each preceded by 2×2 mean pooling. A stage holds
/// `blocks_per_stage` residual blocks of two 3×3 convolutions with
/// per-sample normalization; the head is global average pooling followed by
/// a linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            height: 32,
            width: 32,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            num_classes: 3,
        }
    }
}

/// Desk-scale bound on the classifier size.
pub const MAX_CLASSIFIER_PARAMS: usize = 500_000;

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes = {} < 2", self.num_classes)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid widths {:?}", self.widths)));
        }
        if self.blocks_per_stage == 0 || self.in_channels == 0 {
            return Err(Error::Config("blocks_per_stage and in_channels must be positive".into()));
        }
        let down = 1 << self.widths.len();
        if self.height % down != 0 || self.width % down != 0 {
            return Err(Error::Config(format!(
                "{}×{} input is not divisible by {down} ({} pooling steps)",
                self.height,
                self.width,
                self.widths.len()
            )));
        }
        Ok(())
    }

    pub fn init(&self, rng: &mut RngStream) -> Result<ModelParams> {
        self.validate()?;
        let mut p = ModelParams::new();
        let w0 = self.widths[0];
        p.insert_he("stem.w", &[w0, self.in_channels, 3, 3], 9 * self.in_channels, rng)?;
        let mut c_in = w0;
        for (s, &c) in self.widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let prefix = format!("stage{s}.block{b}");
                p.insert_he(&format!("{prefix}.conv1.w"), &[c, c_in, 3, 3], 9 * c_in, rng)?;
                p.insert_he(&format!("{prefix}.conv2.w"), &[c, c, 3, 3], 9 * c, rng)?;
                c_in = c;
            }
        }
        p.insert_he("head.w", &[c_in, self.num_classes], c_in, rng)?;
        p.insert("head.b", Tensor::zeros([1, self.num_classes]))?;
        if p.count() >= MAX_CLASSIFIER_PARAMS {
            return Err(Error::Config(format!(
                "classifier has {} parameters, desk-scale limit is {MAX_CLASSIFIER_PARAMS}",
                p.count()
            )));
        }
        Ok(p)
    }
}

/// Logits `B×num_classes` for images `B×C×H×W`.
pub fn classifier_forward(cfg: &ClassifierConfig, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
    let want = [cfg.in_channels, cfg.height, cfg.width];
    let b = match *g.shape(x) {
        [b, c, h, w] if [c, h, w] == want => b,
        ref s => return Err(Error::dim("classifier_forward", s, &want)),
    };
    let mut h = g.conv2d(x, bound.var("stem.w")?)?;
    h = g.normalize(h)?;
    h = g.relu(h)?;
    for (s, &c) in cfg.widths.iter().enumerate() {
        h = g.avg_pool2(h)?;
        for blk in 0..cfg.blocks_per_stage {
            let prefix = format!("stage{s}.block{blk}");
            let mut y = g.conv2d(h, bound.var(&format!("{prefix}.conv1.w"))?)?;
            y = g.normalize(y)?;
            y = g.relu(y)?;
            y = g.conv2d(y, bound.var(&format!("{prefix}.conv2.w"))?)?;
            y = g.normalize(y)?;
            let skip = widen_channels(g, h, c)?;
            let sum = g.add(y, skip)?;
            h = g.relu(sum)?;
        }
    }
    let pooled = g.global_avg_pool(h)?;
    let logits = g.matmul(pooled, bound.var("head.w")?)?;
    let ones = g.constant(Tensor::ones([b, 1]));
    let bias = g.matmul(ones, bound.var("head.b")?)?;
    g.add(logits, bias)
}

/// Identity shortcut, zero-padded along channels when the block widens.
fn widen_channels(g: &mut Graph, h: Var, channels: usize) -> Result<Var> {
    let [n, c, hh, ww] = match *g.shape(h) {
        [n, c, hh, ww] => [n, c, hh, ww],
        ref s => return Err(Error::dim("shortcut", s, &[0, channels, 0, 0])),
    };
    match c.cmp(&channels) {
        std::cmp::Ordering::Equal => Ok(h),
        std::cmp::Ordering::Less => {
            let pad = g.constant(Tensor::zeros([n, channels - c, hh, ww]));
            g.concat(&[h, pad])
        }
        std::cmp::Ordering::Greater => Err(Error::Config(format!(
            "stage narrows from {c} to {channels} channels"
        ))),
    }
}

/// Softmax probabilities without gradient tracking, evaluated in chunks.
/// Returns a row-major `N×num_classes` buffer.
pub fn predict_probs(cfg: &ClassifierConfig, params: &ModelParams, images: &Tensor) -> Result<Vec<f64>> {
    const CHUNK: usize = 128;
    let n = images.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n * cfg.num_classes);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(images.select_rows(&idx)?);
        let logits = classifier_forward(cfg, &mut g, &bound, x)?;
        out.extend(softmax_rows(g.value(logits).data(), cfg.num_classes));
        start = end;
    }
    Ok(out)
}
