use candle_core::{Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::sde::{DurationCodecConfig, NoiseSchedule};
use crate::batch::pad_ids;
use crate::data::PhonemeSequence;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, swish, Conformer, ConformerConfig, Dropout, Embedding, Film, Linear, ParamStore, SeqMask};
use crate::tensor::{to_array2, to_tensor};

/// Text (and optionally speaker) conditioning, prepared once per sampling run.
#[derive(Clone)]
pub struct Condition {
    pub phonemes: Vec<usize>,
    /// Phoneme-encoder output `(1, M, d)` for learned models.
    pub features: Option<Tensor>,
    /// Speaker embedding `(1, d_spk)`.
    pub speaker: Option<Tensor>,
}

impl Condition {
    pub fn unconditional(rows: usize) -> Self {
        Self {
            phonemes: vec![0; rows],
            features: None,
            speaker: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.phonemes.len()
    }
}

/// `s(x, t | w)` over a joint state `x` of shape `(M, D_latent + 1)`.
/// Implementations must be differentiable in `x` through candle autodiff.
pub trait ScoreFunction {
    fn state_dim(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule;
    fn score(&self, x: &Tensor, t: f64, cond: &Condition) -> Result<Tensor>;
}

/// Exact score of the VP-SDE marginals for data `x0 ~ N(m, s^2 I)` per
/// cell; `s = 0` is a point mass.
pub struct GaussianScore {
    pub mean: f64,
    pub std: f64,
    pub dim: usize,
    pub schedule: NoiseSchedule,
}

impl ScoreFunction for GaussianScore {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn score(&self, x: &Tensor, t: f64, _cond: &Condition) -> Result<Tensor> {
        let a = self.schedule.alpha_bar(t)?;
        let var = a * self.std * self.std + 1.0 - a;
        if var <= 0.0 {
            return Err(Error::DegenerateTransition);
        }
        Ok(((x - a.sqrt() * self.mean)? * (-1.0 / var))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub vocab_size: usize,
    pub d_latent: usize,
    pub phoneme_encoder: ConformerConfig,
    pub estimator: ConformerConfig,
    /// Present when the model conditions on a reference utterance.
    pub speaker_encoder: Option<ConformerConfig>,
    pub time_dim: usize,
    pub schedule: NoiseSchedule,
    pub codec: DurationCodecConfig,
    pub dropout: f64,
}

impl ScoreConfig {
    /// Phoneme encoder 2 layers at 2x32, estimator 4 layers at 4x32, kernel 7.
    pub fn desk(vocab_size: usize, d_latent: usize) -> Self {
        let pe = ConformerConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            kernel: 7,
            ff_mult: 2,
            look_ahead_only: false,
            attention_window: None,
        };
        Self {
            vocab_size,
            d_latent,
            phoneme_encoder: pe.clone(),
            estimator: ConformerConfig {
                layers: 4,
                heads: 4,
                ..pe
            },
            speaker_encoder: None,
            time_dim: 32,
            schedule: NoiseSchedule::default(),
            codec: DurationCodecConfig::default(),
            dropout: 0.1,
        }
    }

    /// Phoneme encoder 4x(4x128), estimator 10x(8x96), speaker 3x(4x64).
    pub fn full(vocab_size: usize, d_latent: usize) -> Self {
        let c = |layers, heads, d_model| ConformerConfig {
            layers,
            heads,
            d_model,
            kernel: 7,
            ff_mult: 4,
            look_ahead_only: false,
            attention_window: None,
        };
        Self {
            phoneme_encoder: c(4, 4, 128),
            estimator: c(10, 8, 96),
            speaker_encoder: Some(c(3, 4, 64)),
            time_dim: 64,
            ..Self::desk(vocab_size, d_latent)
        }
    }

    /// Desk config with a 2-layer 2x32 speaker encoder.
    pub fn desk_with_speaker(vocab_size: usize, d_latent: usize) -> Self {
        let mut c = Self::desk(vocab_size, d_latent);
        c.speaker_encoder = Some(ConformerConfig {
            layers: 2,
            ..c.phoneme_encoder.clone()
        });
        c
    }

    pub fn state_dim(&self) -> usize {
        self.d_latent + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.codec.validate()?;
        if self.vocab_size < 2 || self.d_latent == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("score model needs vocab >= 2, d_latent > 0, even time_dim".into()));
        }
        Ok(())
    }
}

/// Noise-predicting network: `s = -net(x_t, t, w) / sqrt(1 - abar(t))`.
pub struct ScoreModel {
    pub config: ScoreConfig,
    pub params: ParamStore,
    embed: Embedding,
    phoneme_encoder: Conformer,
    speaker_encoder: Option<Conformer>,
    estimator: Conformer,
    time_in: Linear,
    time_film: Linear,
    out: Linear,
}

fn speaker_dim(cfg: &ScoreConfig) -> usize {
    cfg.speaker_encoder.as_ref().map_or(0, |c| c.d_model)
}

impl ScoreModel {
    pub fn new(config: ScoreConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        let mut root = params.root();
        let s = config.state_dim();
        let pe = &config.phoneme_encoder;
        let est = &config.estimator;
        let embed = Embedding::new(&mut root.pp("embed"), config.vocab_size, pe.d_model)?;
        let phoneme_encoder = Conformer::new(&mut root.pp("phoneme_encoder"), pe.d_model, pe)?;
        let speaker_encoder = match &config.speaker_encoder {
            Some(c) => Some(Conformer::new(&mut root.pp("speaker_encoder"), s, c)?),
            None => None,
        };
        let in_dim = s + pe.d_model + speaker_dim(&config);
        let estimator = Conformer::new(&mut root.pp("estimator"), in_dim, est)?;
        let time_in = Linear::new(&mut root.pp("time_in"), config.time_dim, est.d_model)?;
        let time_film = Linear::zeros(&mut root.pp("time_film"), est.d_model, 2 * est.d_model * est.layers)?;
        let out = Linear::new(&mut root.pp("out"), est.d_model, s)?;
        Ok(Self {
            config,
            params,
            embed,
            phoneme_encoder,
            speaker_encoder,
            estimator,
            time_in,
            time_film,
            out,
        })
    }

    pub fn has_speaker_encoder(&self) -> bool {
        self.speaker_encoder.is_some()
    }

    /// `(B, M)` ids to `(B, M, d)` phoneme features.
    pub fn encode_phonemes(&self, ids: &Tensor, mask: &SeqMask, drop: Option<&Dropout>) -> Result<Tensor> {
        let e = self.embed.forward(ids)?;
        self.phoneme_encoder.forward(&e, mask, None, drop)
    }

    /// Masked mean of the speaker conformer over `(B, R, S)` reference states.
    pub fn speaker_embed_batch(&self, refs: &Tensor, lengths: &[usize], drop: Option<&Dropout>) -> Result<Tensor> {
        let enc = self
            .speaker_encoder
            .as_ref()
            .ok_or_else(|| Error::Config("model has no speaker encoder".into()))?;
        let mask = enc.mask(lengths, refs.dim(1)?, refs.device())?;
        let h = enc.forward(refs, &mask, None, drop)?;
        let n = Tensor::from_vec(lengths.iter().map(|&l| l as f64).collect::<Vec<_>>(), (lengths.len(), 1), refs.device())?;
        Ok(h.sum(1)?.broadcast_div(&n)?)
    }

    /// Embedding of one reference state `x0_ref` (rows = phonemes).
    pub fn speaker_embed(&self, x0_ref: &Array2<f64>) -> Result<Tensor> {
        if x0_ref.nrows() == 0 || x0_ref.ncols() != self.config.state_dim() {
            return Err(Error::Shape(format!("speaker reference of shape {:?}", x0_ref.dim())));
        }
        self.speaker_embed_batch(&to_tensor(x0_ref)?.unsqueeze(0)?, &[x0_ref.nrows()], None)
    }

    fn films(&self, t: &[f64]) -> Result<Vec<Film>> {
        let td = self.config.time_dim;
        let data: Vec<f64> = t.iter().flat_map(|&t| sinusoidal(1000.0 * t, td)).collect();
        let emb = Tensor::from_vec(data, (t.len(), td), &Device::Cpu)?;
        let h = swish(&self.time_in.forward(&emb)?)?;
        let f = self.time_film.forward(&h)?;
        let d = self.config.estimator.d_model;
        (0..self.config.estimator.layers)
            .map(|i| {
                Ok(Film {
                    scale: f.narrow(1, 2 * i * d, d)?.unsqueeze(1)?,
                    shift: f.narrow(1, (2 * i + 1) * d, d)?.unsqueeze(1)?,
                })
            })
            .collect()
    }

    /// Predicted noise `(B, M, S)` for states `x` `(B, M, S)` at per-item times.
    pub fn predict_noise(
        &self,
        x: &Tensor,
        t: &[f64],
        features: &Tensor,
        speaker: Option<&Tensor>,
        mask: &SeqMask,
        drop: Option<&Dropout>,
    ) -> Result<Tensor> {
        let (b, m, _) = x.dims3()?;
        let mut parts = vec![x.clone(), features.clone()];
        match (speaker, self.speaker_encoder.is_some()) {
            (Some(s), true) => parts.push(s.unsqueeze(1)?.broadcast_as((b, m, s.dim(1)?))?.contiguous()?),
            (None, false) => {}
            (Some(_), false) => return Err(Error::Config("speaker embedding given to a model without speaker encoder".into())),
            (None, true) => return Err(Error::Config("model requires a speaker embedding".into())),
        }
        let inp = Tensor::cat(&parts, 2)?;
        let films = self.films(t)?;
        let h = self.estimator.forward(&inp, mask, Some(&films), drop)?;
        Ok(self.out.forward(&h)?.broadcast_mul(&mask.frames)?)
    }

    pub fn prepare(&self, phonemes: &[usize], speaker: Option<&Tensor>) -> Result<Condition> {
        if phonemes.is_empty() {
            return Err(Error::NothingToGenerate);
        }
        if let Some(&bad) = phonemes.iter().find(|&&p| p >= self.config.vocab_size) {
            return Err(Error::Config(format!("phoneme id {bad} outside vocabulary")));
        }
        let (ids, lengths) = pad_ids(&[phonemes], &Device::Cpu)?;
        let mask = self.phoneme_encoder.mask(&lengths, phonemes.len(), &Device::Cpu)?;
        Ok(Condition {
            phonemes: phonemes.to_vec(),
            features: Some(self.encode_phonemes(&ids, &mask, None)?),
            speaker: speaker.cloned(),
        })
    }

    /// Array wrapper over [`ScoreFunction::score`].
    pub fn score_estimate(
        &self,
        x_t: &Array2<f64>,
        t: f64,
        w: &PhonemeSequence,
        speaker: Option<&Tensor>,
    ) -> Result<Array2<f64>> {
        if w.len() != x_t.nrows() {
            return Err(Error::Shape(format!("{} phonemes for {} state rows", w.len(), x_t.nrows())));
        }
        let cond = self.prepare(&w.ids, speaker)?;
        to_array2(&self.score(&to_tensor(x_t)?, t, &cond)?)
    }
}

impl ScoreFunction for ScoreModel {
    fn state_dim(&self) -> usize {
        self.config.state_dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.config.schedule
    }

    fn score(&self, x: &Tensor, t: f64, cond: &Condition) -> Result<Tensor> {
        let (m, s) = x.dims2()?;
        if m != cond.rows() || s != self.state_dim() {
            return Err(Error::Shape(format!(
                "state {m}x{s} for {} phonemes and state dim {}",
                cond.rows(),
                self.state_dim()
            )));
        }
        let a = self.config.schedule.alpha_bar(t)?;
        if a >= 1.0 {
            return Err(Error::DegenerateTransition);
        }
        let features = match &cond.features {
            Some(f) => f.clone(),
            None => self.prepare(&cond.phonemes, None)?.features.expect("prepared"),
        };
        let mask = SeqMask::new(&[m], m, false, &Device::Cpu)?;
        let eps = self.predict_noise(&x.unsqueeze(0)?, &[t], &features, cond.speaker.as_ref(), &mask, None)?;
        Ok((eps.squeeze(0)? * (-1.0 / (1.0 - a).sqrt()))?)
    }
}
