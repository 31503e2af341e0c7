//! Erase-and-restore detection of L2 adversarial examples on small image
//! classifiers: synthetic data, a differentiable target model, CW-L2 and
//! DeepFool attacks, fast-marching inpainting, feature extraction, detectors,
//! divergence analysis and an adaptive attack harness.

pub mod adaptive;
pub mod analysis;
pub mod attack;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod features;
pub mod image;
pub mod inpaint;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
