//! Joint duration/latent diffusion: a VP-SDE over `x0 = [l; z0]`, where
//! `l` holds dequantized log-durations and `z0` the phoneme-rate latents,
//! with a text-conditioned score network and reverse-time samplers.

mod sampler;
mod score;
mod sde;
mod synth;
mod train;

pub use sampler::{integrate_reverse, ode_encode, ode_from, sample, sample_em, sample_ode, SamplerKind, SamplerOptions};
pub use score::{Condition, GaussianScore, ScoreConfig, ScoreFunction, ScoreModel};
pub use sde::{
    dequantize_durations, perturb, quantize_durations, true_transition_score, DurationCodecConfig, NoiseSchedule,
};
pub use synth::{decode_state, synthesize, LatentDecoder, Synthesis};
pub use train::{
    dsm_batch_loss, dsm_loss, join_state, lambda, split_state, train_diffusion, DiffusionExample, DiffusionTrainConfig,
    DsmBatch,
};
