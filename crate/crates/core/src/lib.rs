//! Semanticist core: a 1D causal visual tokenizer with a PCA-like token
//! hierarchy, trained as a conditional diffusion autoencoder with nested
//! classifier-free guidance, plus an autoregressive generator over the
//! resulting continuous tokens and an analysis suite that numerically
//! verifies the structural properties of the learned code.
//!
//! Module map:
//! - [`nn`]: minimal reverse-mode autodiff engine on `ndarray` (f32).
//! - [`schedule`]: DDPM noise schedule, forward process, losses, samplers.
//! - [`encoder`]: causal ViT encoder producing K ordered concept tokens.
//! - [`conditioning`]: null-token bank, nested masking, guidance combination.
//! - [`decoder`]: DiT denoiser conditioned on concept tokens.
//! - [`trainer`]: joint tokenizer training loop (Adam, EMA, LR schedule).
//! - [`ar`]: causal transformer + diffusion-MLP head over concept tokens.
//! - [`analysis`]: explained variance, score-increment orthogonality,
//!   radial power spectra, linear probing.
//! - [`data`], [`checkpoint`], [`token_cache`], [`metrics`]: dataset
//!   ingestion, persistence formats and reconstruction metrics.

pub mod analysis;
pub mod ar;
pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod token_cache;
pub mod trainer;

pub use error::{Error, Result};
