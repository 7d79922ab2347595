//! Phoneme-rate variational autoencoder.
//!
//! The encoder runs over all `N` frames and keeps only the rows at the
//! alignment spikes, giving `M x D_latent` posterior parameters. The decoder
//! scatters the `M` latent rows back onto their spike frames (zeros
//! elsewhere) and predicts the spectrogram under a factorized Laplace
//! likelihood with fixed scale `b`.

mod model;
mod ops;

pub use model::{kl_tensor, laplace_nll_tensor, train_vae, VaeBatch, VaeConfig, VaeForward, VaeModel, VaeTrainConfig};
pub use ops::{
    elbo_terms, gather_at_spikes, kl_to_standard_normal, laplace_nll, sample_posterior, upsample, LatentCode,
    PosteriorParams,
};
