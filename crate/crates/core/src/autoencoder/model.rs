use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{LatentCode, PosteriorParams};
use crate::aligner::{Alignment, TrainReport};
use crate::batch::{pad_matrices, standard_normal, unpad_row, EpochSampler};
use crate::data::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{Conformer, ConformerConfig, Dropout, Linear, Optimizer, OptimizerConfig, ParamStore};
use crate::tensor::{to_array2, to_tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub d_mel: usize,
    pub d_latent: usize,
    pub encoder: ConformerConfig,
    pub decoder: ConformerConfig,
    /// Laplace scale of the decoder likelihood, fixed during training.
    pub laplace_b: f64,
    pub dropout: f64,
}

impl VaeConfig {
    pub fn desk(d_mel: usize) -> Self {
        let conformer = ConformerConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            kernel: 13,
            ff_mult: 2,
            look_ahead_only: false,
            attention_window: None,
        };
        Self {
            d_mel,
            d_latent: 8,
            encoder: conformer.clone(),
            decoder: conformer,
            laplace_b: 0.05,
            dropout: 0.1,
        }
    }

    /// Four layers, 4 heads, 64 channels, kernel 13 on both sides.
    pub fn full(d_mel: usize) -> Self {
        let conformer = ConformerConfig {
            layers: 4,
            heads: 4,
            d_model: 64,
            kernel: 13,
            ff_mult: 4,
            look_ahead_only: false,
            attention_window: None,
        };
        Self {
            encoder: conformer.clone(),
            decoder: conformer,
            ..Self::desk(d_mel)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.laplace_b > 0.0) {
            return Err(Error::Config(format!("laplace_b must be positive, got {}", self.laplace_b)));
        }
        if self.d_latent == 0 || self.d_mel == 0 {
            return Err(Error::Config("d_latent and d_mel must be positive".into()));
        }
        Ok(())
    }
}

/// Utterances and their alignments, borrowed for one forward pass.
pub struct VaeBatch<'a> {
    pub mels: Vec<&'a Array2<f64>>,
    pub alignments: Vec<&'a Alignment>,
}

impl<'a> VaeBatch<'a> {
    pub fn new(mels: Vec<&'a Array2<f64>>, alignments: Vec<&'a Alignment>) -> Result<Self> {
        if mels.len() != alignments.len() || mels.is_empty() {
            return Err(Error::Shape("batch needs equal, nonzero numbers of mels and alignments".into()));
        }
        for (m, a) in mels.iter().zip(&alignments) {
            a.check_frames(m.nrows())?;
        }
        Ok(Self { mels, alignments })
    }

    pub fn total_phonemes(&self) -> usize {
        self.alignments.iter().map(|a| a.len()).sum()
    }
}

/// Intermediate tensors of one training-mode pass.
pub struct VaeForward {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub y_tilde: Tensor,
    /// Decoder features before the mel projection, `(B, T, d_dec)`.
    pub hidden: Tensor,
    pub target: Tensor,
    pub frame_mask: Tensor,
    pub lengths: Vec<usize>,
}

pub struct VaeModel {
    pub config: VaeConfig,
    pub params: ParamStore,
    encoder: Conformer,
    posterior: Linear,
    decoder: Conformer,
    mel_proj: Linear,
}

/// Flat `(B * T)` row index of every spike, batch-major.
fn spike_rows(alignments: &[&Alignment], t_max: usize) -> Result<Tensor> {
    let idx: Vec<u32> = alignments
        .iter()
        .enumerate()
        .flat_map(|(b, a)| a.spike_indices().into_iter().map(move |j| (b * t_max + j) as u32))
        .collect();
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, &Device::Cpu)?)
}

/// One-hot `(B * T, sum M)` matrix placing latent row `i` on its spike frame.
fn scatter_matrix(alignments: &[&Alignment], t_max: usize) -> Result<Tensor> {
    let total: usize = alignments.iter().map(|a| a.len()).sum();
    let rows = alignments.len() * t_max;
    let mut data = vec![0.0; rows * total];
    let mut col = 0;
    for (b, a) in alignments.iter().enumerate() {
        for j in a.spike_indices() {
            data[(b * t_max + j) * total + col] = 1.0;
            col += 1;
        }
    }
    Ok(Tensor::from_vec(data, (rows, total), &Device::Cpu)?)
}

pub fn kl_tensor(mu: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    // 0.5 * (mu^2 + sigma^2 - 1 - 2 log sigma)
    let s2 = (log_sigma * 2.0)?.exp()?;
    let t = ((mu.sqr()? + s2)? - (log_sigma * 2.0)?)?;
    Ok(((t - 1.0)? * 0.5)?.sum_all()?)
}

/// Laplace NLL over valid frames only.
pub fn laplace_nll_tensor(y: &Tensor, y_hat: &Tensor, frame_mask: &Tensor, b: f64) -> Result<Tensor> {
    let d = y.dim(2)?;
    let cells = frame_mask.sum_all()?.to_scalar::<f64>()? * d as f64;
    let abs = (y - y_hat)?.abs()?.broadcast_mul(frame_mask)?.sum_all()?;
    Ok(((abs / b)? + cells * (2.0 * b).ln())?)
}

impl VaeModel {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        let mut root = params.root();
        let encoder = Conformer::new(&mut root.pp("encoder"), config.d_mel, &config.encoder)?;
        let posterior = Linear::new(&mut root.pp("posterior"), config.encoder.d_model, 2 * config.d_latent)?;
        let decoder = Conformer::new(&mut root.pp("decoder"), config.d_latent, &config.decoder)?;
        let mel_proj = Linear::new(&mut root.pp("mel_proj"), config.decoder.d_model, config.d_mel)?;
        Ok(Self {
            config,
            params,
            encoder,
            posterior,
            decoder,
            mel_proj,
        })
    }

    /// `(mu, log_sigma)`, each `(sum M, D_latent)` in batch-major order.
    pub fn encode_tensor(
        &self,
        mels: &Tensor,
        lengths: &[usize],
        alignments: &[&Alignment],
        drop: Option<&Dropout>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, t, _) = mels.dims3()?;
        let mask = self.encoder.mask(lengths, t, mels.device())?;
        let e = self.encoder.forward(mels, &mask, None, drop)?;
        let e = e.reshape((b * t, ()))?;
        let gathered = e.index_select(&spike_rows(alignments, t)?, 0)?;
        let p = self.posterior.forward(&gathered)?;
        let d = self.config.d_latent;
        Ok((p.narrow(1, 0, d)?, p.narrow(1, d, d)?))
    }

    /// `(y_tilde, hidden)` for latents `(sum M, D_latent)` over padded length `t_max`.
    pub fn decode_tensor(
        &self,
        z: &Tensor,
        alignments: &[&Alignment],
        lengths: &[usize],
        drop: Option<&Dropout>,
    ) -> Result<(Tensor, Tensor)> {
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        let b = alignments.len();
        let up = scatter_matrix(alignments, t_max)?
            .matmul(z)?
            .reshape((b, t_max, self.config.d_latent))?;
        let mask = self.decoder.mask(lengths, t_max, z.device())?;
        let h = self.decoder.forward(&up, &mask, None, drop)?;
        let y = self.mel_proj.forward(&h)?.broadcast_mul(&mask.frames)?;
        Ok((y, h))
    }

    /// Encoder, reparameterized draw with the given standard-normal `noise`
    /// `(sum M, D_latent)`, and decoder.
    pub fn forward_train(&self, batch: &VaeBatch<'_>, noise: &Tensor, drop: Option<&Dropout>) -> Result<VaeForward> {
        let (x, lengths) = pad_matrices(&batch.mels, &Device::Cpu)?;
        let (mu, log_sigma) = self.encode_tensor(&x, &lengths, &batch.alignments, drop)?;
        let z = (&mu + log_sigma.exp()?.mul(noise)?)?;
        let (y_tilde, hidden) = self.decode_tensor(&z, &batch.alignments, &lengths, drop)?;
        let t_max = x.dim(1)?;
        let mask = crate::nn::SeqMask::new(&lengths, t_max, false, &Device::Cpu)?;
        Ok(VaeForward {
            mu,
            log_sigma,
            y_tilde,
            hidden,
            target: x,
            frame_mask: mask.frames,
            lengths,
        })
    }

    /// Negative ELBO averaged over the batch, using `y_hat` in place of the
    /// decoder output when given (the adversarially extended decoder).
    pub fn neg_elbo(&self, fwd: &VaeForward, y_hat: Option<&Tensor>) -> Result<Tensor> {
        let b = fwd.lengths.len() as f64;
        let kl = kl_tensor(&fwd.mu, &fwd.log_sigma)?;
        let nll = laplace_nll_tensor(&fwd.target, y_hat.unwrap_or(&fwd.y_tilde), &fwd.frame_mask, self.config.laplace_b)?;
        Ok(((kl + nll)? / b)?)
    }

    pub fn encode(&self, mel: &MelSpectrogram, a: &Alignment) -> Result<PosteriorParams> {
        a.check_frames(mel.frames())?;
        let (x, lengths) = pad_matrices(&[&mel.values], &Device::Cpu)?;
        let (mu, ls) = self.encode_tensor(&x, &lengths, &[a], None)?;
        PosteriorParams::new(to_array2(&mu)?, to_array2(&ls)?)
    }

    /// Decoder output and pre-projection features for one utterance.
    pub fn decode_with_hidden(&self, z0: &LatentCode, a: &Alignment, frames: usize) -> Result<(Tensor, Tensor)> {
        if z0.z0.nrows() != a.len() || z0.z0.ncols() != self.config.d_latent {
            return Err(Error::Shape(format!(
                "latent {:?} for {} spikes and D_latent {}",
                z0.z0.dim(),
                a.len(),
                self.config.d_latent
            )));
        }
        a.check_frames(frames)?;
        self.decode_tensor(&to_tensor(&z0.z0)?, &[a], &[frames], None)
    }

    pub fn decode(&self, z0: &LatentCode, a: &Alignment, frames: usize) -> Result<MelSpectrogram> {
        let (y, _) = self.decode_with_hidden(z0, a, frames)?;
        MelSpectrogram::new(unpad_row(&y, 0, frames)?, 0.0)
    }

    /// Negative ELBO of one utterance for a fixed posterior noise draw.
    pub fn elbo_loss(&self, mel: &MelSpectrogram, a: &Alignment, noise: &Array2<f64>) -> Result<f64> {
        let batch = VaeBatch::new(vec![&mel.values], vec![a])?;
        let fwd = self.forward_train(&batch, &to_tensor(noise)?, None)?;
        Ok(self.neg_elbo(&fwd, None)?.to_scalar::<f64>()?)
    }

    pub fn encoder_prefixes() -> [&'static str; 2] {
        ["encoder.", "posterior."]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 16,
            optimizer: OptimizerConfig {
                learning_rate: 2e-3,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

/// Minimizes the negative ELBO over `(mel, alignment)` pairs.
pub fn train_vae(
    data: &[(&MelSpectrogram, &Alignment)],
    config: VaeConfig,
    train: &VaeTrainConfig,
) -> Result<(VaeModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Config("no training data".into()));
    }
    let model = VaeModel::new(config, train.seed)?;
    let drop = Dropout::new(model.config.dropout, train.seed ^ 0x7AE);
    let mut opt = Optimizer::new(model.params.all_vars(), &train.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let mut sampler = EpochSampler::new(data.len());
    let mut report = TrainReport::default();
    for _ in 0..train.steps {
        let idx = sampler.next_batch(train.batch_size, &mut rng);
        let batch = VaeBatch::new(
            idx.iter().map(|i| &data[*i].0.values).collect(),
            idx.iter().map(|i| data[*i].1).collect(),
        )?;
        let noise = standard_normal(&mut rng, batch.total_phonemes(), model.config.d_latent)?;
        let fwd = model.forward_train(&batch, &noise, Some(&drop))?;
        let loss = model.neg_elbo(&fwd, None)?;
        let value = loss.to_scalar::<f64>()?;
        opt.backward_step(&loss)?;
        report.losses.push(value);
    }
    Ok((model, report))
}
