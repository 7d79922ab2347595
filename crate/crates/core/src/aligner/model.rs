use candle_core::{Device, Tensor, D};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forced_align, minimal_ctc_forward_backward, Alignment};
use crate::batch::{pad_matrices, unpad_row, EpochSampler};
use crate::data::{MelSpectrogram, PhonemeSequence, SynthCorpus};
use crate::error::{Error, Result};
use crate::nn::{Conformer, ConformerConfig, Dropout, Linear, Optimizer, OptimizerConfig, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignerConfig {
    pub vocab_size: usize,
    pub d_mel: usize,
    pub conformer: ConformerConfig,
    pub dropout: f64,
}

impl AlignerConfig {
    /// Desk-scale recognizer. Each frame sees only itself and the next
    /// frame, so a segment's last frame is the one place that is
    /// distinguishable from the rest of the segment, and spikes land there.
    pub fn desk(vocab_size: usize, d_mel: usize) -> Self {
        Self {
            vocab_size,
            d_mel,
            conformer: ConformerConfig {
                layers: 1,
                heads: 2,
                d_model: 32,
                kernel: 2,
                ff_mult: 2,
                look_ahead_only: true,
                attention_window: Some(0),
            },
            dropout: 0.1,
        }
    }

    /// Five layers, 8 heads, 64 channels, kernel 3.
    pub fn full(vocab_size: usize, d_mel: usize) -> Self {
        Self {
            conformer: ConformerConfig {
                layers: 5,
                heads: 8,
                d_model: 64,
                kernel: 3,
                ff_mult: 4,
                look_ahead_only: true,
                attention_window: None,
            },
            ..Self::desk(vocab_size, d_mel)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.vocab_size + 1
    }
}

pub struct AlignerModel {
    pub config: AlignerConfig,
    pub params: ParamStore,
    encoder: Conformer,
    head: Linear,
}

impl AlignerModel {
    pub fn new(config: AlignerConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(seed);
        let mut root = params.root();
        let encoder = Conformer::new(&mut root.pp("encoder"), config.d_mel, &config.conformer)?;
        let head = Linear::new(&mut root.pp("head"), config.conformer.d_model, config.num_classes())?;
        Ok(Self {
            config,
            params,
            encoder,
            head,
        })
    }

    /// Per-frame log-probabilities over `vocab_size + 1` classes (0 = blank),
    /// `(B, T, C)`.
    pub fn log_probs_batch(&self, mels: &Tensor, lengths: &[usize], drop: Option<&Dropout>) -> Result<Tensor> {
        let (_, t, _) = mels.dims3()?;
        let mask = self.encoder.mask(lengths, t, mels.device())?;
        let h = self.encoder.forward(mels, &mask, None, drop)?;
        Ok(candle_nn::ops::log_softmax(&self.head.forward(&h)?, D::Minus1)?)
    }

    pub fn log_probs(&self, mel: &MelSpectrogram) -> Result<Array2<f64>> {
        let (x, lengths) = pad_matrices(&[&mel.values], &Device::Cpu)?;
        let lp = self.log_probs_batch(&x, &lengths, None)?;
        unpad_row(&lp, 0, mel.frames())
    }

    pub fn align(&self, mel: &MelSpectrogram, phonemes: &PhonemeSequence) -> Result<Alignment> {
        forced_align(&self.log_probs(mel)?, &phonemes.ids)
    }

    /// Mean minimal-CTC loss over a batch, with a surrogate tensor whose
    /// gradient equals the forward-backward gradient.
    fn batch_loss(&self, items: &[(&MelSpectrogram, &PhonemeSequence)], drop: Option<&Dropout>) -> Result<(f64, Tensor)> {
        let mats: Vec<&Array2<f64>> = items.iter().map(|(m, _)| &m.values).collect();
        let (x, lengths) = pad_matrices(&mats, &Device::Cpu)?;
        let lp = self.log_probs_batch(&x, &lengths, drop)?;
        let (b, t, c) = lp.dims3()?;
        let mut grad = vec![0.0; b * t * c];
        let mut total = 0.0;
        for (i, (_, ph)) in items.iter().enumerate() {
            let row = unpad_row(&lp, i, lengths[i])?;
            let (loss, g) = minimal_ctc_forward_backward(&row, &ph.ids)?;
            total += loss;
            for ((tt, cc), v) in g.indexed_iter() {
                grad[(i * t + tt) * c + cc] = *v / b as f64;
            }
        }
        let g = Tensor::from_vec(grad, (b, t, c), &Device::Cpu)?;
        let surrogate = (lp * g)?.sum_all()?;
        Ok((total / b as f64, surrogate))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for AlignerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            optimizer: OptimizerConfig {
                learning_rate: 2e-3,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Minimizes the mean minimal-CTC loss over random mini-batches.
pub fn train_aligner(
    corpus: &SynthCorpus,
    config: AlignerConfig,
    train: &AlignerTrainConfig,
) -> Result<(AlignerModel, TrainReport)> {
    if corpus.items.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let model = AlignerModel::new(config, train.seed)?;
    let drop = Dropout::new(model.config.dropout, train.seed ^ 0xA11);
    let mut opt = Optimizer::new(model.params.all_vars(), &train.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut sampler = EpochSampler::new(corpus.items.len());
    let mut report = TrainReport::default();
    for _ in 0..train.steps {
        let idx = sampler.next_batch(train.batch_size, &mut rng);
        let items: Vec<_> = idx
            .iter()
            .map(|i| (&corpus.items[*i].mel, &corpus.items[*i].phonemes))
            .collect();
        let (loss, surrogate) = model.batch_loss(&items, Some(&drop))?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("aligner loss diverged: {loss}")));
        }
        opt.backward_step(&surrogate)?;
        report.losses.push(loss);
    }
    Ok((model, report))
}

/// Fraction of spikes within `tol` frames of the reference.
pub fn spike_accuracy(pred: &[Alignment], truth: &[Alignment], tol: usize) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.spikes.iter().zip(&t.spikes) {
            total += 1;
            if a.abs_diff(*b) <= tol {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}
