//! Network definitions built on the [`numerics`](crate::numerics) tape: a
//! small residual CNN classifier and a UNet-lite noise predictor.

mod classifier;
mod denoiser;
mod embedding;
mod params;

pub use classifier::{classifier_forward, predict_probs, ClassifierConfig};
pub use denoiser::{denoiser_forward, DenoiserConfig};
pub use embedding::time_embedding;
pub use params::{load_checkpoint, save_checkpoint, Bound, ModelParams};
