//! Phoneme-rate latent diffusion text-to-speech.
//!
//! Speech is encoded at one latent vector per phoneme using spikes from a
//! minimal-CTC aligner; a VP-SDE diffusion model then samples durations and
//! latents jointly, and posterior guidance on the denoised estimate turns
//! editing and prompt-based voice cloning into inpainting.

pub mod adversarial;
pub mod aligner;
pub mod autoencoder;
mod batch;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod inverse;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
