//! Desk-scale generative audio engine.
//!
//! A latent flow-matching model over 64-channel audio latent sequences at
//! 43 Hz, trained with a shortcut (step-size-conditioned) objective so that
//! few-step Euler sampling works without distillation. Supports masked
//! audio conditioning for in/outpainting and chunked long-form generation,
//! a SigLIP-style contrastive synchronization module, and spectral
//! evaluation metrics (sliced-Wasserstein spectral distance, Fréchet
//! distance, onset alignment). Everything runs on a synthetic event-to-sound
//! dataset so the full pipeline is verifiable on a CPU.

pub mod autodiff;
pub mod checkpoint;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sample;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wav;

pub use error::{CoreError, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;

/// Latent frame rate of the audio latent sequence, in Hz.
pub const LATENT_RATE_HZ: f64 = 43.0;
/// Number of channels per latent frame.
pub const LATENT_CHANNELS: usize = 64;
/// Frame rate of the semantic conditioning stream.
pub const SEMANTIC_FPS: f64 = 8.0;
/// Frame rate of the synchronization conditioning stream.
pub const SYNC_FPS: f64 = 24.0;
