//! Weak and strong image augmentations for consistency training.
//!
//! Images are `1×H×W` slices in `[−1, 1]`; pixels shifted or rotated in
//! from outside the frame take the neutral value 0.

use crate::numerics::RngStream;

/// Individual transforms, in the order they are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transform {
    /// Horizontal flip with probability 0.5.
    Flip,
    /// Integer shift of up to 2 px per axis.
    Translate,
    /// Bilinear rotation of up to ±15°.
    Rotate,
    /// Additive Gaussian noise, σ = 0.1.
    Noise,
    /// Contrast scale in [0.5, 1.5] about the image mean.
    Contrast,
    /// One 8×8 patch set to 0.
    Cutout,
}

pub const MAX_SHIFT: i64 = 2;
pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const NOISE_STD: f64 = 0.1;
pub const CONTRAST_RANGE: (f64, f64) = (0.5, 1.5);
pub const CUTOUT_SIDE: usize = 8;

/// An ordered transform pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentationSpec {
    pub transforms: Vec<Transform>,
}

impl AugmentationSpec {
    pub fn weak() -> Self {
        Self {
            transforms: vec![Transform::Flip, Transform::Translate],
        }
    }

    pub fn strong() -> Self {
        Self {
            transforms: vec![
                Transform::Flip,
                Transform::Translate,
                Transform::Rotate,
                Transform::Noise,
                Transform::Contrast,
                Transform::Cutout,
            ],
        }
    }

    /// Augments a batch `N×1×H×W` stored row-major in `images`.
    pub fn apply_batch(&self, images: &[f64], side: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut out = Vec::with_capacity(images.len());
        for img in images.chunks_exact(side * side) {
            out.extend(self.apply(img, side, rng));
        }
        out
    }

    /// Augments one `side×side` image; the result is clipped to `[−1, 1]`.
    pub fn apply(&self, image: &[f64], side: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut img = image.to_vec();
        for t in &self.transforms {
            img = match t {
                Transform::Flip => {
                    if rng.bernoulli(0.5) {
                        flip(&img, side)
                    } else {
                        img
                    }
                }
                Transform::Translate => {
                    let dx = rng.int_in(-MAX_SHIFT, MAX_SHIFT);
                    let dy = rng.int_in(-MAX_SHIFT, MAX_SHIFT);
                    translate(&img, side, dx, dy)
                }
                Transform::Rotate => {
                    let deg = rng.uniform_in(-MAX_ROTATION_DEG, MAX_ROTATION_DEG);
                    rotate(&img, side, deg.to_radians())
                }
                Transform::Noise => img.into_iter().map(|v| v + NOISE_STD * rng.normal()).collect(),
                Transform::Contrast => {
                    let c = rng.uniform_in(CONTRAST_RANGE.0, CONTRAST_RANGE.1);
                    contrast(&img, c)
                }
                Transform::Cutout => {
                    let y = rng.below(side - CUTOUT_SIDE + 1);
                    let x = rng.below(side - CUTOUT_SIDE + 1);
                    cutout(img, side, y, x, CUTOUT_SIDE)
                }
            };
        }
        img.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        img
    }
}

pub fn flip(img: &[f64], side: usize) -> Vec<f64> {
    img.chunks_exact(side)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

/// Output pixel `(y, x)` reads input `(y − dy, x − dx)`.
pub fn translate(img: &[f64], side: usize, dx: i64, dy: i64) -> Vec<f64> {
    let s = side as i64;
    let mut out = vec![0.0; img.len()];
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = (y - dy, x - dx);
            if (0..s).contains(&sy) && (0..s).contains(&sx) {
                out[(y * s + x) as usize] = img[(sy * s + sx) as usize];
            }
        }
    }
    out
}

/// Rotation about the image centre with bilinear sampling.
pub fn rotate(img: &[f64], side: usize, radians: f64) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = radians.sin_cos();
    let at = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= side as i64 || x >= side as i64 {
            0.0
        } else {
            img[y as usize * side + x as usize]
        }
    };
    let mut out = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f64 - c, y as f64 - c);
            let sx = cos * u + sin * v + c;
            let sy = -sin * u + cos * v + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            out[y * side + x] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

pub fn contrast(img: &[f64], scale: f64) -> Vec<f64> {
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    img.iter().map(|v| mean + scale * (v - mean)).collect()
}

pub fn cutout(mut img: Vec<f64>, side: usize, top: usize, left: usize, size: usize) -> Vec<f64> {
    for y in top..(top + size).min(side) {
        for x in left..(left + size).min(side) {
            img[y * side + x] = 0.0;
        }
    }
    img
}
