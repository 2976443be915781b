//! Procedural three-class image corpus: a bright horizontal "cortical" band
//! whose thickness shrinks and whose erosion grows with the class index,
//! drawn over a smooth background.
//!
//! Every image is rendered from its own derived RNG stream, so a bundle is
//! a pure function of its spec and seed, and a smaller labeled set is a
//! prefix of a larger one.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::load_pool;
use crate::numerics::{seeded_rng, tnsr, RngStream, Tensor};
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 3;
pub const IMAGE_SIDE: usize = 32;
const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Per-class latent that drives the renderer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorticalParams {
    pub class_id: usize,
    /// Band height in rows.
    pub band_thickness: usize,
    /// Probability that a band pixel is eroded back to background.
    pub erosion_noise: f64,
    /// Band rows stay within the upper half when set (covariate shift).
    pub upper_half: bool,
}

impl CorticalParams {
    pub fn validate(&self) -> Result<()> {
        if self.class_id >= NUM_CLASSES {
            return Err(Error::Config(format!("class id {} out of range", self.class_id)));
        }
        if self.band_thickness == 0 || self.band_thickness > IMAGE_SIDE {
            return Err(Error::Config(format!(
                "band thickness {} outside [1, {IMAGE_SIDE}]",
                self.band_thickness
            )));
        }
        if !(0.0..=1.0).contains(&self.erosion_noise) {
            return Err(Error::Config(format!("erosion density {} outside [0,1]", self.erosion_noise)));
        }
        Ok(())
    }
}

/// Renderer knobs. The class-conditional means are the task definition;
/// the remaining fields set how hard the task is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub thickness_means: [usize; NUM_CLASSES],
    pub thickness_jitter: usize,
    pub erosion: [f64; NUM_CLASSES],
    /// Amplitude of the smooth background relative to a band level of 1.
    pub background_amplitude: f64,
    /// Spread of the band level around 1.
    pub band_level_jitter: f64,
    /// Std of i.i.d. pixel noise added everywhere.
    pub pixel_noise: f64,
    /// Rows kept free at the top and bottom edges.
    pub margin: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            thickness_means: [8, 5, 2],
            thickness_jitter: 1,
            erosion: [0.02, 0.10, 0.25],
            background_amplitude: 0.3,
            band_level_jitter: 0.25,
            pixel_noise: 0.3,
            margin: 2,
        }
    }
}

impl RenderConfig {
    /// Draws the latent for one image of class `class_id`.
    pub fn draw_params(&self, class_id: usize, upper_half: bool, rng: &mut RngStream) -> CorticalParams {
        let mean = self.thickness_means[class_id] as i64;
        let j = self.thickness_jitter as i64;
        let thickness = (mean + rng.int_in(-j, j)).max(1) as usize;
        CorticalParams {
            class_id,
            band_thickness: thickness,
            erosion_noise: self.erosion[class_id],
            upper_half,
        }
    }
}

/// Pre-standardization render plus the geometry that produced it.
#[derive(Debug, Clone)]
pub struct RawRender {
    pub pixels: Vec<f64>,
    /// First band row.
    pub top: usize,
    pub thickness: usize,
}

/// Renders one image before standardization. Band pixels replace the
/// background at a level near 1; eroded band pixels keep the background.
pub fn render_raw(cfg: &RenderConfig, p: &CorticalParams, rng: &mut RngStream) -> Result<RawRender> {
    p.validate()?;
    let side = IMAGE_SIDE;
    let thickness = p.band_thickness;
    let margin = if thickness + 2 * cfg.margin > side { 0 } else { cfg.margin };
    let lowest_end = if p.upper_half { side / 2 } else { side - margin };
    let last_top = lowest_end.saturating_sub(thickness).max(margin);
    let top = margin + rng.below(last_top - margin + 1);

    // Smooth background: two random low-frequency cosine waves.
    let mut waves = [(0.0, 0.0, 0.0, 0.0); 2];
    for w in &mut waves {
        *w = (
            rng.uniform_in(0.5, 2.0),
            rng.uniform_in(-1.0, 1.0),
            rng.uniform_in(0.0, std::f64::consts::TAU),
            rng.uniform_in(0.5, 1.0),
        );
    }
    let level = 1.0 + cfg.band_level_jitter * rng.uniform_in(-1.0, 1.0);
    let mut pixels = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
            let bg: f64 = waves
                .iter()
                .map(|&(f, dir, phase, amp)| {
                    amp * (std::f64::consts::TAU * f * (u * dir + v * (1.0 - dir.abs())) + phase).cos()
                })
                .sum::<f64>()
                * cfg.background_amplitude
                / 2.0;
            let in_band = (top..top + thickness).contains(&y);
            let eroded = in_band && rng.bernoulli(p.erosion_noise);
            let base = if in_band && !eroded { level } else { bg };
            pixels[y * side + x] = base + cfg.pixel_noise * rng.normal();
        }
    }
    Ok(RawRender {
        pixels,
        top,
        thickness,
    })
}

/// Renders one `[1, 32, 32]` image: raw render, per-image standardization,
/// clamp to `[−1, 1]`.
pub fn render_sample(cfg: &RenderConfig, p: &CorticalParams, rng: &mut RngStream) -> Result<Tensor> {
    let raw = render_raw(cfg, p, rng)?;
    Tensor::new(vec![1, IMAGE_SIDE, IMAGE_SIDE], standardize(&raw.pixels))
}

fn standardize(px: &[f64]) -> Vec<f64> {
    let n = px.len() as f64;
    let mean = px.iter().sum::<f64>() / n;
    let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-6);
    px.iter().map(|v| ((v - mean) / std).clamp(-1.0, 1.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    RealClean,
    RealBiased,
    Synthetic,
}

impl PoolKind {
    pub const ALL: [PoolKind; 3] = [PoolKind::RealClean, PoolKind::RealBiased, PoolKind::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolKind::RealClean => "real_clean",
            PoolKind::RealBiased => "real_biased",
            PoolKind::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for PoolKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pool kind `{s}`")))
    }
}

/// Distribution of the biased pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasSpec {
    pub class_proportions: [f64; NUM_CLASSES],
    pub upper_half: bool,
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            class_proportions: [0.7, 0.2, 0.1],
            upper_half: true,
        }
    }
}

impl BiasSpec {
    fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_proportions.iter().sum();
        if self.class_proportions.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "bias proportions {:?} must be in [0,1] and sum to 1",
                self.class_proportions
            )));
        }
        Ok(())
    }

    fn draw_class(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (c, p) in self.class_proportions.iter().enumerate() {
            acc += p;
            if u < acc {
                return c;
            }
        }
        NUM_CLASSES - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleSpec {
    pub n_labeled_per_class: usize,
    pub n_unlabeled: usize,
    pub n_test_per_class: usize,
    pub pool_kind: PoolKind,
    pub bias: BiasSpec,
    pub seed: u64,
    /// Required for `synthetic`: a `.tnsr` file or a directory holding
    /// `pool_synthetic.tnsr`.
    pub pool_path: Option<PathBuf>,
    pub render: RenderConfig,
}

impl Default for BundleSpec {
    fn default() -> Self {
        Self {
            n_labeled_per_class: 10,
            n_unlabeled: 6000,
            n_test_per_class: 200,
            pool_kind: PoolKind::RealClean,
            bias: BiasSpec::default(),
            seed: 0,
            pool_path: None,
            render: RenderConfig::default(),
        }
    }
}

/// Images with their sample ids and (for labeled splits) classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub ids: Vec<u64>,
    /// `N×1×32×32`.
    pub images: Tensor,
    /// Present for labeled and test splits. For real unlabeled pools the
    /// generating class is kept for diagnostics only.
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Keeps the first `n_per_class` items of every class, in order.
    pub fn take_per_class(&self, n_per_class: usize) -> Result<Split> {
        let mut seen = [0usize; NUM_CLASSES];
        let mut keep = Vec::new();
        for (i, &c) in self.labels.iter().enumerate() {
            if seen[c] < n_per_class {
                seen[c] += 1;
                keep.push(i);
            }
        }
        if seen.iter().any(|&s| s < n_per_class) {
            return Err(Error::Config(format!(
                "split has only {seen:?} items per class, {n_per_class} requested"
            )));
        }
        Ok(Split {
            ids: keep.iter().map(|&i| self.ids[i]).collect(),
            images: self.images.select_rows(&keep)?,
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// First `n` items.
    pub fn take(&self, n: usize) -> Result<Split> {
        if n > self.len() {
            return Err(Error::Config(format!("split has {} items, {n} requested", self.len())));
        }
        let keep: Vec<usize> = (0..n).collect();
        Ok(Split {
            ids: self.ids[..n].to_vec(),
            images: self.images.select_rows(&keep)?,
            labels: self.labels.get(..n).map(<[usize]>::to_vec).unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub labeled: Split,
    pub unlabeled: Split,
    pub test: Split,
    pub pool_kind: PoolKind,
    pub num_classes: usize,
}

impl DatasetBundle {
    /// Fails with a configuration error if any sample id appears twice.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, split) in [("labeled", &self.labeled), ("unlabeled", &self.unlabeled), ("test", &self.test)] {
            for id in &split.ids {
                if !seen.insert(*id) {
                    return Err(Error::Config(format!("sample id {id} of the {name} split is not unique")));
                }
            }
        }
        Ok(())
    }
}

// Stream layout: split tag in the top bits, then class and index.
const TAG_LABELED: u64 = 1 << 48;
const TAG_TEST: u64 = 2 << 48;
const TAG_UNLABELED: u64 = 3 << 48;
const TAG_BIASED: u64 = 4 << 48;
const CLASS_SHIFT: u32 = 32;

fn render_labeled(spec: &BundleSpec, tag: u64, per_class: usize) -> Result<Split> {
    let mut ids = Vec::with_capacity(per_class * NUM_CLASSES);
    let mut data = Vec::with_capacity(per_class * NUM_CLASSES * PIXELS);
    let mut labels = Vec::with_capacity(per_class * NUM_CLASSES);
    // Interleave classes so prefixes stay balanced.
    for k in 0..per_class {
        for c in 0..NUM_CLASSES {
            let stream = tag | ((c as u64) << CLASS_SHIFT) | k as u64;
            let mut rng = seeded_rng(spec.seed, stream);
            let p = spec.render.draw_params(c, false, &mut rng);
            data.extend_from_slice(render_sample(&spec.render, &p, &mut rng)?.data());
            ids.push(stream);
            labels.push(c);
        }
    }
    let n = ids.len();
    Ok(Split {
        ids,
        images: Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels,
    })
}

fn render_pool(spec: &BundleSpec, biased: bool) -> Result<Split> {
    let tag = if biased { TAG_BIASED } else { TAG_UNLABELED };
    let n = spec.n_unlabeled;
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seeded_rng(spec.seed, tag | i as u64);
        let c = if biased {
            spec.bias.draw_class(&mut rng)
        } else {
            rng.below(NUM_CLASSES)
        };
        let p = spec.render.draw_params(c, biased && spec.bias.upper_half, &mut rng);
        data.extend_from_slice(render_sample(&spec.render, &p, &mut rng)?.data());
        labels.push(c);
    }
    Ok(Split {
        ids: (0..n as u64).map(|i| tag | i).collect(),
        images: Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels,
    })
}

fn synthetic_pool(spec: &BundleSpec) -> Result<Split> {
    let path = spec.pool_path.as_deref().ok_or_else(|| {
        Error::Config("pool_kind `synthetic` needs `pool_path`; run `sample` first".into())
    })?;
    let pool = load_pool(path)?;
    let want = [1, IMAGE_SIDE, IMAGE_SIDE];
    if pool.shape().len() != 4 || pool.shape()[1..] != want {
        return Err(Error::Format {
            what: "synthetic pool",
            detail: format!("expected N×1×32×32, got {:?}", pool.shape()),
        });
    }
    let full = Split {
        ids: (0..pool.shape()[0] as u64).map(|i| TAG_UNLABELED | (1 << 47) | i).collect(),
        images: pool,
        labels: Vec::new(),
    };
    full.take(spec.n_unlabeled)
}

/// Builds the labeled/unlabeled/test bundle described by `spec`.
pub fn make_bundle(spec: &BundleSpec) -> Result<DatasetBundle> {
    if spec.n_labeled_per_class == 0 || spec.n_test_per_class == 0 {
        return Err(Error::Config("labeled and test counts must be positive".into()));
    }
    spec.bias.validate()?;
    let unlabeled = match spec.pool_kind {
        PoolKind::RealClean => render_pool(spec, false)?,
        PoolKind::RealBiased => render_pool(spec, true)?,
        PoolKind::Synthetic => synthetic_pool(spec)?,
    };
    let bundle = DatasetBundle {
        labeled: render_labeled(spec, TAG_LABELED, spec.n_labeled_per_class)?,
        unlabeled,
        test: render_labeled(spec, TAG_TEST, spec.n_test_per_class)?,
        pool_kind: spec.pool_kind,
        num_classes: NUM_CLASSES,
    };
    bundle.check_disjoint()?;
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub counts: BundleCounts,
    pub seed: u64,
    pub pool_kind: PoolKind,
    pub bias_spec: BiasSpec,
}

const SPLITS: [&str; 3] = ["labeled", "unlabeled", "test"];

#[derive(Serialize, Deserialize)]
struct LabelRow {
    id: u64,
    class: Option<usize>,
}

/// Writes `<split>.tnsr`, `<split>_labels.csv` (`id,class`) and
/// `bundle_meta.json` into `dir`.
pub fn save_bundle(dir: &Path, bundle: &DatasetBundle, seed: u64, bias: &BiasSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, split) in SPLITS.iter().zip([&bundle.labeled, &bundle.unlabeled, &bundle.test]) {
        tnsr::write(dir.join(format!("{name}.tnsr")), &split.images)?;
        let path = dir.join(format!("{name}_labels.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
        let labels_public = *name != "unlabeled";
        for (i, id) in split.ids.iter().enumerate() {
            let class = if labels_public { split.labels.get(i).copied() } else { None };
            w.serialize(LabelRow { id: *id, class })?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let meta = BundleMeta {
        counts: BundleCounts {
            labeled: bundle.labeled.len(),
            unlabeled: bundle.unlabeled.len(),
            test: bundle.test.len(),
        },
        seed,
        pool_kind: bundle.pool_kind,
        bias_spec: bias.clone(),
    };
    let path = dir.join("bundle_meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

/// Reads a bundle written by [`save_bundle`]. Unlabeled classes are not
/// persisted, so the loaded unlabeled split has no labels.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let meta_path = dir.join("bundle_meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&text)?;
    let mut splits = Vec::new();
    for name in SPLITS {
        let images = tnsr::read(dir.join(format!("{name}.tnsr")))?;
        let path = dir.join(format!("{name}_labels.csv"));
        let mut r = csv::Reader::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for row in r.deserialize() {
            let row: LabelRow = row?;
            ids.push(row.id);
            if let Some(c) = row.class {
                labels.push(c);
            }
        }
        if images.shape().first() != Some(&ids.len()) {
            return Err(Error::Format {
                what: "bundle",
                detail: format!("{name}: {} ids for images of shape {:?}", ids.len(), images.shape()),
            });
        }
        splits.push(Split { ids, images, labels });
    }
    let test = splits.pop().unwrap_or_else(|| unreachable!());
    let unlabeled = splits.pop().unwrap_or_else(|| unreachable!());
    let labeled = splits.pop().unwrap_or_else(|| unreachable!());
    let bundle = DatasetBundle {
        labeled,
        unlabeled,
        test,
        pool_kind: meta.pool_kind,
        num_classes: NUM_CLASSES,
    };
    bundle.check_disjoint()?;
    Ok(bundle)
}

/// Outcome of the hand-coded thickness classifier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparabilityReport {
    pub labeled_accuracy: f64,
    pub test_accuracy: f64,
    /// Thickness cut points between adjacent classes.
    pub cuts: [f64; NUM_CLASSES - 1],
}

/// Estimates band thickness as the number of rows whose mean intensity
/// lies above the midpoint between the brightest row and the median row.
pub fn estimate_thickness(image: &[f64]) -> usize {
    let rows: Vec<f64> = image
        .chunks_exact(IMAGE_SIDE)
        .map(|row| row.iter().sum::<f64>() / IMAGE_SIDE as f64)
        .collect();
    let mut sorted = rows.clone();
    sorted.sort_by(f64::total_cmp);
    let (Some(&max), Some(&median)) = (sorted.last(), sorted.get(sorted.len() / 2)) else {
        return 0;
    };
    let cut = (max + median) / 2.0;
    rows.iter().filter(|&&r| r > cut).count()
}

fn hand_accuracy(split: &Split, cuts: &[f64; NUM_CLASSES - 1], means: &[usize; NUM_CLASSES]) -> f64 {
    if split.is_empty() {
        return 0.0;
    }
    // Classes are ordered by decreasing thickness.
    let thick_first: Vec<usize> = {
        let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
        order.sort_by_key(|&c| std::cmp::Reverse(means[c]));
        order
    };
    let correct = split
        .images
        .data()
        .chunks_exact(PIXELS)
        .zip(&split.labels)
        .filter(|(img, &label)| {
            let t = estimate_thickness(img) as f64;
            let rank = cuts.iter().filter(|&&cut| t < cut).count();
            thick_first[rank] == label
        })
        .count();
    correct as f64 / split.len() as f64
}

/// Checks that the task is learnable by scoring a hand-coded thickness
/// classifier with cut points halfway between the class thickness means.
pub fn bayes_gap_check(bundle: &DatasetBundle, render: &RenderConfig) -> Result<SeparabilityReport> {
    if bundle.labeled.is_empty() || bundle.test.is_empty() {
        return Err(Error::Config("bayes_gap_check needs labeled and test splits".into()));
    }
    let mut sorted = render.thickness_means;
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let cuts = [
        (sorted[0] + sorted[1]) as f64 / 2.0,
        (sorted[1] + sorted[2]) as f64 / 2.0,
    ];
    Ok(SeparabilityReport {
        labeled_accuracy: hand_accuracy(&bundle.labeled, &cuts, &render.thickness_means),
        test_accuracy: hand_accuracy(&bundle.test, &cuts, &render.thickness_means),
        cuts,
    })
}
