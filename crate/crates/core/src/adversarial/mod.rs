//! Adversarial refinement of the VAE decoder: a residual conv stack on the
//! decoder features and a spectral-norm discriminator trained with
//! least-squares and feature-matching losses.

mod losses;
mod model;
mod train;

pub use losses::{feature_matching_loss, lsgan_d_loss, lsgan_g_loss};
pub use model::{Discriminator, Refiner, DISC_CHANNELS, REFINER_CHANNELS};
pub use train::{AdvMetrics, AdvModel, AdvTrainConfig, AdvTrainer, AdvWeights};
