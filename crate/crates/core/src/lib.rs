//! Activation-patching laboratory: a hooked toy transformer, the patching
//! engine (noising, denoising, ablation, Gaussian corruption, path patching),
//! patching metrics, analytically built toy circuits and an experiment runner.

pub mod circuits;
pub mod error;
pub mod hook;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use hook::{HookId, Site};
pub use model::{ActivationCache, ModelConfig, Parameters, TinyTransformer};
pub use tensor::Tensor;
