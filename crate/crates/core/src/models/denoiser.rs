use serde::{Deserialize, Serialize};

use super::embedding::time_embedding;
use super::params::{Bound, ModelParams};
use crate::numerics::{Graph, RngStream, Tensor, Var};
use crate::{Error, Result};

/// UNet-lite ε-predictor.
///
/// Level `l` carries `base_channels·2^l` channels at resolution `S/2^l`.
/// The encoder pools down `depth` times; the decoder upsamples, concatenates
/// the matching encoder activation and applies one block per level. Every
/// block is conv → time projection → per-sample normalization → relu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Largest valid step index `T`.
    pub max_timestep: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 2,
            time_embed_dim: 64,
            in_channels: 1,
            height: 32,
            width: 32,
            max_timestep: 400,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 || self.max_timestep == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        let down = 1 << self.depth;
        if self.height % down != 0 || self.width % down != 0 {
            return Err(Error::Config(format!(
                "{}×{} input is not divisible by {down}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn init(&self, rng: &mut RngStream) -> Result<ModelParams> {
        self.validate()?;
        let e = self.time_embed_dim;
        let mut p = ModelParams::new();
        let block = |p: &mut ModelParams, name: &str, c_in: usize, c_out: usize, rng: &mut RngStream| -> Result<()> {
            p.insert_he(&format!("{name}.w"), &[c_out, c_in, 3, 3], 9 * c_in, rng)?;
            p.insert_he(&format!("{name}.t.w"), &[e, c_out], e, rng)?;
            p.insert(format!("{name}.t.b"), Tensor::zeros([1, c_out]))
        };
        block(&mut p, "in", self.in_channels, self.channels(0), rng)?;
        for l in 1..=self.depth {
            block(&mut p, &format!("down{l}"), self.channels(l - 1), self.channels(l), rng)?;
        }
        for l in (0..self.depth).rev() {
            let c_in = self.channels(l + 1) + self.channels(l);
            block(&mut p, &format!("up{l}"), c_in, self.channels(l), rng)?;
        }
        let c0 = self.channels(0);
        p.insert_he("out.w", &[self.in_channels, c0, 3, 3], 9 * c0, rng)?;
        Ok(p)
    }
}

/// Predicted noise with the same shape as `x_t`; `steps[i]` is the
/// diffusion step of item `i`, in `[1, max_timestep]`.
pub fn denoiser_forward(
    cfg: &DenoiserConfig,
    g: &mut Graph,
    bound: &Bound,
    x_t: Var,
    steps: &[usize],
) -> Result<Var> {
    let want = [cfg.in_channels, cfg.height, cfg.width];
    let b = match *g.shape(x_t) {
        [b, c, h, w] if [c, h, w] == want => b,
        ref s => return Err(Error::dim("denoiser_forward", s, &want)),
    };
    if steps.len() != b {
        return Err(Error::dim("denoiser_forward", g.shape(x_t), &[steps.len()]));
    }
    if let Some(&t) = steps.iter().find(|&&t| t == 0 || t > cfg.max_timestep) {
        return Err(Error::Index(format!(
            "diffusion step {t} outside [1, {}]",
            cfg.max_timestep
        )));
    }
    let rows = steps
        .iter()
        .map(|&t| time_embedding(t as f64, cfg.time_embed_dim))
        .collect::<Result<Vec<_>>>()?;
    let temb = g.constant(Tensor::stack(&rows)?);
    let ones_b = g.constant(Tensor::ones([b, 1]));

    let mut h = block(g, bound, "in", x_t, temb, ones_b)?;
    let mut skips = vec![h];
    for l in 1..=cfg.depth {
        let pooled = g.avg_pool2(h)?;
        h = block(g, bound, &format!("down{l}"), pooled, temb, ones_b)?;
        skips.push(h);
    }
    for l in (0..cfg.depth).rev() {
        let up = g.upsample2(h)?;
        let joined = g.concat(&[up, skips[l]])?;
        h = block(g, bound, &format!("up{l}"), joined, temb, ones_b)?;
    }
    g.conv2d(h, bound.var("out.w")?)
}

fn block(g: &mut Graph, bound: &Bound, name: &str, x: Var, temb: Var, ones_b: Var) -> Result<Var> {
    let h = g.conv2d(x, bound.var(&format!("{name}.w"))?)?;
    // One time-dependent offset per (item, channel), spread over the grid.
    let proj = g.matmul(temb, bound.var(&format!("{name}.t.w"))?)?;
    let bias = g.matmul(ones_b, bound.var(&format!("{name}.t.b"))?)?;
    let per_channel = g.add(proj, bias)?;
    let h = g.add_channel_bias(h, per_channel)?;
    let h = g.normalize(h)?;
    g.relu(h)
}
