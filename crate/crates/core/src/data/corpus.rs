//! Synthetic phoneme-conditioned spectrogram corpus with known alignments.
//!
//! Every phoneme id owns a Gaussian bump over Mel-bin index, held for a
//! sampled number of frames. Bumps for speaker `s` (of `S`) are centred at
//! `(id + 0.5 + s/S) / V * D_mel` with width `D_mel / (2V)`, so speaker 0
//! matches the plain `(id + 0.5) / V * D_mel` layout and other speakers sit
//! between its peaks. Consecutive phonemes are always distinct, which keeps
//! every segment boundary visible in the spectrogram.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MelSpectrogram, PhonemeSequence};
use crate::aligner::Alignment;
use crate::error::{Error, Result};
use crate::tensor::{load_array2, save_array2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusConfig {
    pub vocab_size: usize,
    pub num_utterances: usize,
    /// Inclusive range of segment lengths in frames.
    pub frames_per_phoneme_range: (usize, usize),
    /// Inclusive range of phonemes per utterance.
    #[serde(default = "default_phonemes_range")]
    pub phonemes_per_utterance_range: (usize, usize),
    pub d_mel: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Number of distinct template sets ("speakers").
    #[serde(default = "default_speakers")]
    pub num_speakers: usize,
    /// Log-energy away from any bump.
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// Peak height of a bump above the floor.
    #[serde(default = "default_height")]
    pub height: f64,
    #[serde(default = "default_hop")]
    pub frame_hop_s: f64,
}

fn default_phonemes_range() -> (usize, usize) {
    (4, 10)
}
fn default_speakers() -> usize {
    1
}
fn default_floor() -> f64 {
    -4.0
}
fn default_height() -> f64 {
    4.0
}
fn default_hop() -> f64 {
    0.0125
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 6,
            num_utterances: 500,
            frames_per_phoneme_range: (2, 8),
            phonemes_per_utterance_range: default_phonemes_range(),
            d_mel: 20,
            noise_std: 0.05,
            seed: 0,
            num_speakers: 1,
            floor: default_floor(),
            height: default_height(),
            frame_hop_s: default_hop(),
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        let (lo, hi) = self.frames_per_phoneme_range;
        if lo < 1 || hi < lo {
            return bad("frames_per_phoneme_range must satisfy 1 <= min <= max");
        }
        let (plo, phi) = self.phonemes_per_utterance_range;
        if plo < 1 || phi < plo {
            return bad("phonemes_per_utterance_range must satisfy 1 <= min <= max");
        }
        if self.d_mel < 1 {
            return bad("d_mel must be >= 1");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        if self.num_speakers < 1 {
            return bad("num_speakers must be >= 1");
        }
        Ok(())
    }
}

/// Per-speaker, per-phoneme spectral templates, `templates[s][id][bin]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateTable {
    pub vocab_size: usize,
    pub d_mel: usize,
    pub num_speakers: usize,
    pub templates: Vec<Vec<Vec<f64>>>,
}

impl TemplateTable {
    pub fn build(cfg: &SynthCorpusConfig) -> Self {
        let v = cfg.vocab_size as f64;
        let d = cfg.d_mel as f64;
        let width = d / (2.0 * v);
        let templates = (0..cfg.num_speakers)
            .map(|s| {
                let shift = s as f64 / cfg.num_speakers as f64;
                (0..cfg.vocab_size)
                    .map(|id| {
                        let center = (id as f64 + 0.5 + shift) / v * d;
                        (0..cfg.d_mel)
                            .map(|k| {
                                let x = k as f64 + 0.5 - center;
                                cfg.floor + cfg.height * (-x * x / (2.0 * width * width)).exp()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            vocab_size: cfg.vocab_size,
            d_mel: cfg.d_mel,
            num_speakers: cfg.num_speakers,
            templates,
        }
    }

    pub fn get(&self, speaker: usize, id: usize) -> &[f64] {
        &self.templates[speaker][id]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub mel: MelSpectrogram,
    pub phonemes: PhonemeSequence,
    /// Ground truth, for oracle checks only.
    pub true_alignment: Alignment,
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthCorpusConfig,
    pub templates: TemplateTable,
    pub items: Vec<CorpusItem>,
}

impl SynthCorpus {
    /// SHA-256 over config, phonemes and spectrogram values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        for item in &self.items {
            for id in &item.phonemes.ids {
                h.update((*id as u64).to_le_bytes());
            }
            for v in item.mel.values.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Mean duration of each phoneme id under the ground-truth alignments;
    /// `None` for ids that never occur.
    pub fn mean_durations(&self) -> Vec<Option<f64>> {
        let mut sum = vec![0.0; self.config.vocab_size];
        let mut count = vec![0usize; self.config.vocab_size];
        for item in &self.items {
            for (id, d) in item.phonemes.ids.iter().zip(&item.true_alignment.durations) {
                sum[*id] += *d as f64;
                count[*id] += 1;
            }
        }
        sum.iter()
            .zip(&count)
            .map(|(s, c)| (*c > 0).then(|| s / *c as f64))
            .collect()
    }
}

pub fn gen_corpus(config: &SynthCorpusConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let templates = TemplateTable::build(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Separate stream: texts and durations do not depend on the noise level.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let (dlo, dhi) = config.frames_per_phoneme_range;
    let (plo, phi) = config.phonemes_per_utterance_range;
    let mut items = Vec::with_capacity(config.num_utterances);
    for _ in 0..config.num_utterances {
        let speaker = rng.gen_range(0..config.num_speakers);
        let m = rng.gen_range(plo..=phi);
        let mut ids = Vec::with_capacity(m);
        for i in 0..m {
            let id = loop {
                let id = rng.gen_range(0..config.vocab_size);
                if i == 0 || ids[i - 1] != id {
                    break id;
                }
            };
            ids.push(id);
        }
        let durations: Vec<usize> = (0..m).map(|_| rng.gen_range(dlo..=dhi)).collect();
        let n: usize = durations.iter().sum();
        let mut values = Array2::zeros((n, config.d_mel));
        let mut frame = 0;
        for (id, d) in ids.iter().zip(&durations) {
            let tpl = templates.get(speaker, *id);
            for _ in 0..*d {
                for (k, t) in tpl.iter().enumerate() {
                    let eps = if config.noise_std > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
                    values[[frame, k]] = t + eps;
                }
                frame += 1;
            }
        }
        items.push(CorpusItem {
            mel: MelSpectrogram::new(values, config.frame_hop_s)?,
            phonemes: PhonemeSequence::new(ids, config.vocab_size)?,
            true_alignment: Alignment::from_durations(&durations)?,
            speaker,
        });
    }
    Ok(SynthCorpus {
        config: config.clone(),
        templates,
        items,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestItem {
    mel: String,
    phonemes: Vec<usize>,
    spikes: Vec<usize>,
    speaker: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: SynthCorpusConfig,
    fingerprint: String,
    items: Vec<ManifestItem>,
}

/// Writes `manifest.json`, `templates.json` and one `mel_XXXXX.bin` per item.
pub fn save_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(corpus.items.len());
    for (i, item) in corpus.items.iter().enumerate() {
        let name = format!("mel_{i:05}.bin");
        save_array2(&dir.join(&name), &item.mel.values)?;
        items.push(ManifestItem {
            mel: name,
            phonemes: item.phonemes.ids.clone(),
            spikes: item.true_alignment.spikes.clone(),
            speaker: item.speaker,
        });
    }
    let manifest = Manifest {
        config: corpus.config.clone(),
        fingerprint: corpus.fingerprint(),
        items,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("templates.json"), serde_json::to_string_pretty(&corpus.templates)?)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<SynthCorpus> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let templates: TemplateTable = serde_json::from_slice(&fs::read(dir.join("templates.json"))?)?;
    let cfg = manifest.config;
    let items = manifest
        .items
        .into_iter()
        .map(|it| {
            let values = load_array2(&dir.join(&it.mel))?;
            Ok(CorpusItem {
                mel: MelSpectrogram::new(values, cfg.frame_hop_s)?,
                phonemes: PhonemeSequence::new(it.phonemes, cfg.vocab_size)?,
                true_alignment: Alignment::from_spikes(&it.spikes)?,
                speaker: it.speaker,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = SynthCorpus {
        config: cfg,
        templates,
        items,
    };
    if corpus.fingerprint() != manifest.fingerprint {
        return Err(Error::Checkpoint(format!(
            "corpus fingerprint mismatch in {}",
            dir.display()
        )));
    }
    Ok(corpus)
}
