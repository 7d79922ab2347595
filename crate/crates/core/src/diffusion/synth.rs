use ndarray::Array2;
use rand::Rng;
use candle_core::Tensor;

use super::sampler::{sample, SamplerOptions};
use super::score::ScoreModel;
use super::sde::quantize_durations;
use super::train::split_state;
use crate::adversarial::AdvModel;
use crate::aligner::Alignment;
use crate::autoencoder::{LatentCode, VaeModel};
use crate::data::{MelSpectrogram, PhonemeSequence};
use crate::error::Result;

/// Anything that turns a phoneme-rate latent and alignment into frames.
pub trait LatentDecoder {
    fn decode_latent(&self, z0: &LatentCode, a: &Alignment, frames: usize) -> Result<MelSpectrogram>;
}

impl LatentDecoder for VaeModel {
    fn decode_latent(&self, z0: &LatentCode, a: &Alignment, frames: usize) -> Result<MelSpectrogram> {
        self.decode(z0, a, frames)
    }
}

impl LatentDecoder for AdvModel {
    fn decode_latent(&self, z0: &LatentCode, a: &Alignment, frames: usize) -> Result<MelSpectrogram> {
        self.decode(z0, a, frames)
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub alignment: Alignment,
    /// Sampled joint state `[l; z0]`.
    pub state: Array2<f64>,
}

/// Splits a joint state, quantizes durations and decodes over `N = a_M` frames.
pub fn decode_state(
    state: &Array2<f64>,
    model: &ScoreModel,
    decoder: &dyn LatentDecoder,
    frame_hop_s: f64,
) -> Result<Synthesis> {
    let (l, z0) = split_state(state);
    let d = quantize_durations(&l, &model.config.codec);
    let alignment = Alignment::from_durations(&d)?;
    let frames = alignment.total_frames();
    let mut mel = decoder.decode_latent(&LatentCode { z0 }, &alignment, frames)?;
    mel.frame_hop_s = frame_hop_s;
    Ok(Synthesis {
        mel,
        alignment,
        state: state.clone(),
    })
}

/// Samples `x0 = [l; z0]` for `w` and decodes it.
pub fn synthesize<R: Rng>(
    model: &ScoreModel,
    decoder: &dyn LatentDecoder,
    w: &PhonemeSequence,
    speaker: Option<&Tensor>,
    opts: &SamplerOptions,
    frame_hop_s: f64,
    rng: &mut R,
) -> Result<Synthesis> {
    let cond = model.prepare(&w.ids, speaker)?;
    let state = sample(model, &cond, opts, rng)?;
    decode_state(&state, model, decoder, frame_hop_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::VaeConfig;
    use crate::diffusion::score::ScoreConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_count_is_duration_sum() {
        let vae = VaeModel::new(VaeConfig::desk(5), 0).unwrap();
        let model = ScoreModel::new(ScoreConfig::desk(4, 8), 0).unwrap();
        let w = PhonemeSequence::new(vec![0, 3, 1], 4).unwrap();
        let opts = SamplerOptions {
            steps: 5,
            ..Default::default()
        };
        let s = synthesize(&model, &vae, &w, None, &opts, 0.01, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.mel.frames(), s.alignment.durations.iter().sum::<usize>());
        assert_eq!(s.alignment.len(), 3);
        assert_eq!(s.state.dim(), (3, 9));
    }
}
