//! Posterior guidance on the denoised estimate, and its use for text-based
//! editing and prompt-based voice cloning.

mod edit;
mod guidance;

pub use edit::{edit, observed_states, speech_continuation, zero_shot, EditOptions, EditResult, Models, ZeroShotResult};
pub use guidance::{
    denoised_estimate, guidance_gradient, guidance_objective, guided_sample, masked_select, EditSpec, GuidanceConfig,
    Observation, XiMode,
};
