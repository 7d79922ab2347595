use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::AdvTrainConfig;
use crate::aligner::{AlignerConfig, AlignerTrainConfig};
use crate::autoencoder::{VaeConfig, VaeTrainConfig};
use crate::data::SynthCorpusConfig;
use crate::nn::ConformerConfig;
use crate::diffusion::{DiffusionTrainConfig, ScoreConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignerStage {
    pub model: AlignerConfig,
    pub train: AlignerTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeStage {
    pub model: VaeConfig,
    pub train: VaeTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionStage {
    pub model: ScoreConfig,
    pub train: DiffusionTrainConfig,
    /// Re-centre the duration codec on the aligned corpus before training.
    pub refit_codec: bool,
}

/// One JSON file describing a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthCorpusConfig,
    pub aligner: AlignerStage,
    pub vae: VaeStage,
    pub gan: AdvTrainConfig,
    pub diffusion: DiffusionStage,
}

impl RunConfig {
    /// Desk-scale defaults on the default synthetic corpus. Stage seeds are
    /// offsets of `seed` so one number pins the whole run.
    pub fn desk(seed: u64) -> Self {
        let data = SynthCorpusConfig {
            seed,
            ..Default::default()
        };
        let (v, d) = (data.vocab_size, data.d_mel);
        let vae = VaeConfig::desk(d);
        let d_latent = vae.d_latent;
        Self {
            aligner: AlignerStage {
                model: AlignerConfig::desk(v, d),
                train: AlignerTrainConfig {
                    seed: seed.wrapping_add(1),
                    ..Default::default()
                },
            },
            vae: VaeStage {
                model: vae,
                train: VaeTrainConfig {
                    seed: seed.wrapping_add(2),
                    ..Default::default()
                },
            },
            gan: AdvTrainConfig {
                seed: seed.wrapping_add(3),
                ..Default::default()
            },
            diffusion: DiffusionStage {
                model: ScoreConfig::desk(v, d_latent),
                train: DiffusionTrainConfig {
                    seed: seed.wrapping_add(4),
                    ..Default::default()
                },
                refit_codec: true,
            },
            data,
        }
    }

    /// Tiny models and a few steps per stage: exercises every code path in
    /// seconds, with no quality expectations.
    pub fn smoke(seed: u64) -> Self {
        let mut cfg = Self::desk(seed);
        cfg.data.num_utterances = 12;
        cfg.data.phonemes_per_utterance_range = (2, 4);
        cfg.data.frames_per_phoneme_range = (2, 4);
        cfg.data.d_mel = 8;
        let tiny = ConformerConfig {
            layers: 1,
            heads: 1,
            d_model: 8,
            kernel: 3,
            ff_mult: 1,
            look_ahead_only: false,
            attention_window: None,
        };
        cfg.aligner.model.d_mel = 8;
        cfg.aligner.model.conformer = ConformerConfig {
            look_ahead_only: true,
            ..tiny.clone()
        };
        cfg.aligner.train.steps = 3;
        cfg.aligner.train.batch_size = 4;
        cfg.vae.model.d_mel = 8;
        cfg.vae.model.d_latent = 2;
        cfg.vae.model.encoder = tiny.clone();
        cfg.vae.model.decoder = tiny.clone();
        cfg.vae.train.steps = 3;
        cfg.vae.train.batch_size = 4;
        cfg.gan.steps = 2;
        cfg.gan.batch_size = 2;
        cfg.diffusion.model.d_latent = 2;
        cfg.diffusion.model.phoneme_encoder = tiny.clone();
        cfg.diffusion.model.estimator = tiny;
        cfg.diffusion.model.time_dim = 8;
        cfg.diffusion.train.steps = 3;
        cfg.diffusion.train.batch_size = 4;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Cross-stage consistency: every model must agree on vocabulary,
    /// spectrogram width and latent width.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let (v, d) = (self.data.vocab_size, self.data.d_mel);
        let mismatch = |what: &str, got: usize, want: usize| {
            Err(Error::Config(format!("{what} is {got} but the corpus needs {want}")))
        };
        if self.aligner.model.vocab_size != v {
            return mismatch("aligner.model.vocab_size", self.aligner.model.vocab_size, v);
        }
        if self.aligner.model.d_mel != d {
            return mismatch("aligner.model.d_mel", self.aligner.model.d_mel, d);
        }
        self.vae.model.validate()?;
        if self.vae.model.d_mel != d {
            return mismatch("vae.model.d_mel", self.vae.model.d_mel, d);
        }
        self.gan.weights.validate()?;
        self.diffusion.model.validate()?;
        if self.diffusion.model.vocab_size != v {
            return mismatch("diffusion.model.vocab_size", self.diffusion.model.vocab_size, v);
        }
        if self.diffusion.model.d_latent != self.vae.model.d_latent {
            return mismatch(
                "diffusion.model.d_latent",
                self.diffusion.model.d_latent,
                self.vae.model.d_latent,
            );
        }
        for (name, batch) in [
            ("aligner", self.aligner.train.batch_size),
            ("vae", self.vae.train.batch_size),
            ("gan", self.gan.batch_size),
            ("diffusion", self.diffusion.train.batch_size),
        ] {
            if batch == 0 {
                return Err(Error::Config(format!("{name}: batch_size must be >= 1")));
            }
        }
        Ok(())
    }
}

/// SHA-256 of the canonical JSON of any serializable config.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid_and_round_trips() {
        let cfg = RunConfig::desk(7);
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn smoke_config_is_valid() {
        RunConfig::smoke(0).validate().unwrap();
    }

    #[test]
    fn inconsistent_widths_are_config_errors() {
        let mut cfg = RunConfig::desk(0);
        cfg.diffusion.model.d_latent += 1;
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("d_latent"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::desk(0)).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::desk(0);
        let mut b = a.clone();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.gan.steps += 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}
