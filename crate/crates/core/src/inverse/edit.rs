use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::guidance::{guided_sample, masked_select, EditSpec, GuidanceConfig, Observation};
use crate::aligner::{AlignerModel, Alignment};
use crate::autoencoder::VaeModel;
use crate::data::{MelSpectrogram, PhonemeSequence};
use crate::diffusion::{
    decode_state, dequantize_durations, join_state, LatentDecoder, SamplerOptions, ScoreFunction, ScoreModel,
};
use crate::error::{Error, Result};

/// The trained stack used by editing and cloning.
pub struct Models<'a> {
    pub aligner: &'a AlignerModel,
    pub vae: &'a VaeModel,
    pub score: &'a ScoreModel,
    pub decoder: &'a dyn LatentDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditOptions {
    pub sampler: SamplerOptions,
    pub guidance: GuidanceConfig,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerOptions {
                steps: 300,
                ..Default::default()
            },
            guidance: GuidanceConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub mel: MelSpectrogram,
    pub alignment: Alignment,
    /// Sampled `x0` on the edited layout.
    pub state: Array2<f64>,
    pub phonemes: Vec<usize>,
    /// Segmentation of the edited sequence.
    pub layout: EditSpec,
    pub observation: Observation,
    pub source_alignment: Alignment,
    /// Full-length `mu_tilde` of the source utterance.
    pub source_state: Array2<f64>,
}

impl EditResult {
    /// `|x0 - o| / sigma` on the kept rows.
    pub fn kept_residuals(&self) -> Result<Array2<f64>> {
        self.observation
            .normalized_residual(&masked_select(&self.state, &self.layout)?)
    }
}

/// `mu_tilde = [l; mu]` and `sigma_tilde = [1; sigma]` of an aligned utterance.
pub fn observed_states(
    vae: &VaeModel,
    score: &ScoreModel,
    y: &MelSpectrogram,
    a: &Alignment,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let p = vae.encode(y, a)?;
    let l = dequantize_durations(&a.durations, &vec![0.5; a.len()], &score.config.codec)?;
    let mu_tilde = join_state(&l, &p.mu)?;
    let sigma_tilde = join_state(&vec![1.0; a.len()], &p.sigma())?;
    Ok((mu_tilde, sigma_tilde))
}

/// Forced-aligns `(y, w)`, observes the kept rows and samples the edited
/// sequence under posterior guidance.
pub fn edit<R: Rng>(
    models: &Models<'_>,
    y: &MelSpectrogram,
    w: &PhonemeSequence,
    spec: &EditSpec,
    opts: &EditOptions,
    rng: &mut R,
) -> Result<EditResult> {
    let edited = spec.apply(&w.ids)?;
    if edited.is_empty() {
        return Err(Error::NothingToGenerate);
    }
    let a = models.aligner.align(y, w)?;
    let (mu_tilde, sigma_tilde) = observed_states(models.vae, models.score, y, &a)?;
    let observation = Observation::from_states(&mu_tilde, &sigma_tilde, spec)?;
    let speaker = if models.score.has_speaker_encoder() {
        Some(models.score.speaker_embed(&mu_tilde)?)
    } else {
        None
    };
    let cond = models.score.prepare(&edited, speaker.as_ref())?;
    let layout = spec.edited_layout();
    let state = guided_sample(models.score, &cond, &observation, &layout, &opts.sampler, &opts.guidance, rng)?;
    let synth = decode_state(&state, models.score, models.decoder, y.frame_hop_s)?;
    debug_assert_eq!(state.ncols(), models.score.state_dim());
    Ok(EditResult {
        mel: synth.mel,
        alignment: synth.alignment,
        state,
        phonemes: edited,
        layout,
        observation,
        source_alignment: a,
        source_state: mu_tilde,
    })
}

#[derive(Debug, Clone)]
pub struct ZeroShotResult {
    /// Frames of the generated continuation only.
    pub mel: MelSpectrogram,
    /// Alignment of the continuation, relative to its first frame.
    pub alignment: Alignment,
    /// Frames covered by the reconstructed prompt, `a_{M_ref}`.
    pub prompt_frames: usize,
    pub full: EditResult,
}

/// Clones the voice of `(ref_y, ref_w)` for `new_w` by treating the
/// reference as the kept prefix of an insertion at the end.
pub fn zero_shot<R: Rng>(
    models: &Models<'_>,
    ref_y: &MelSpectrogram,
    ref_w: &PhonemeSequence,
    new_w: &PhonemeSequence,
    opts: &EditOptions,
    rng: &mut R,
) -> Result<ZeroShotResult> {
    if new_w.is_empty() {
        return Err(Error::NothingToGenerate);
    }
    let spec = EditSpec {
        m_a: ref_w.len(),
        m_b: 0,
        m_c: 0,
        replacement: new_w.ids.clone(),
    };
    let full = edit(models, ref_y, ref_w, &spec, opts, rng)?;
    let m_ref = ref_w.len();
    let prompt_frames: usize = full.alignment.durations[..m_ref].iter().sum();
    let values = full.mel.values.slice(ndarray::s![prompt_frames.., ..]).to_owned();
    let mel = MelSpectrogram::new(values, full.mel.frame_hop_s)?;
    let alignment = Alignment::from_durations(&full.alignment.durations[m_ref..])?;
    Ok(ZeroShotResult {
        mel,
        alignment,
        prompt_frames,
        full,
    })
}

/// Continuation of `ref_y` with `new_w`; the same procedure as [`zero_shot`].
pub fn speech_continuation<R: Rng>(
    models: &Models<'_>,
    ref_y: &MelSpectrogram,
    ref_w: &PhonemeSequence,
    new_w: &PhonemeSequence,
    opts: &EditOptions,
    rng: &mut R,
) -> Result<ZeroShotResult> {
    zero_shot(models, ref_y, ref_w, new_w, opts, rng)
}
