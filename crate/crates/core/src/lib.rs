//! Classifier-guided diffusion synthesis for imbalanced classification.
//!
//! A denoising diffusion model is pretrained on the (unlabelled) training
//! features and frozen. While a classifier trains, every epoch a fresh batch
//! of synthetic samples is drawn from the diffusion model, steered towards
//! each target class by the gradient of the classifier's log-probability,
//! and the per-class budget is re-allocated from per-class training
//! accuracy so that weak classes receive more samples.
//!
//! Modules, bottom-up:
//!
//! - [`numeric`]: arrays, feed-forward nets, reverse-mode gradients, SGD.
//! - [`datagen`]: imbalanced Gaussian mixtures, stratified splits, dataset files.
//! - [`diffusion`]: noise schedule, denoiser training, (guided) reverse sampling.
//! - [`classifier`]: training, per-class accuracy, input gradients.
//! - [`aas`]: accuracy-adaptive allocation of the synthetic budget.
//! - [`metrics`]: Macro-F1, balanced accuracy, MCC.
//! - [`iois_loop`]: the epoch loop and its ablation modes.
//! - [`config`], [`checkpoint`]: run configuration and model files.
//!
//! With the default `parallel` feature, sampling chains and batch gradients
//! are spread over the rayon pool; results do not depend on its size.

pub mod aas;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod iois_loop;
pub mod metrics;
pub mod numeric;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
