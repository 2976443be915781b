//! Semi-supervised image classification with scheduled pseudo-label
//! thresholds, plus a minimal denoising diffusion model used to manufacture
//! synthetic unlabeled data.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense `f64` tensors, a reverse-mode tape, SGD, seeded RNG
//!   streams and the `.tnsr` file format.
//! - [`models`]: a small residual CNN classifier and a UNet-lite noise
//!   predictor, both built on the tape.
//! - [`schedulers`]: confidence-threshold schedules for pseudo-labeling,
//!   including sinusoidal threshold decay.
//! - [`diffusion`]: DDPM noise schedule, forward corruption, noise-prediction
//!   loss and ancestral sampling.
//! - [`datagen`]: the procedural three-class corpus and unlabeled-pool
//!   variants.
//! - [`ssl`]: FixMatch-style consistency training and evaluation.
//! - [`harness`]: configuration, experiment grids and reporting.

pub mod datagen;
pub mod diffusion;
mod error;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod schedulers;
pub mod ssl;

pub use error::{Error, Result};
