use std::io::Write;

use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{feature_matching_loss, lsgan_d_loss, lsgan_g_loss};
use super::model::{Discriminator, Refiner};
use crate::aligner::Alignment;
use crate::batch::{standard_normal, EpochSampler};
use crate::autoencoder::{LatentCode, VaeBatch, VaeModel};
use crate::batch::unpad_row;
use crate::data::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{Dropout, Optimizer, OptimizerConfig, ParamStore, SeqMask};
use crate::tensor::to_tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvWeights {
    pub w_d: f64,
    pub w_g: f64,
    pub w_feat: f64,
    pub w_vae: f64,
}

impl Default for AdvWeights {
    fn default() -> Self {
        Self {
            w_d: 1.0,
            w_g: 1.0,
            w_feat: 2.0,
            w_vae: 1.0,
        }
    }
}

impl AdvWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_d, self.w_g, self.w_feat, self.w_vae];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub weights: AdvWeights,
    pub optimizer: OptimizerConfig,
    /// Whether the posterior encoder keeps learning through `w_vae * L_VAE`.
    pub train_encoder: bool,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            weights: AdvWeights::default(),
            optimizer: OptimizerConfig {
                learning_rate: 5e-4,
                ..Default::default()
            },
            train_encoder: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvMetrics {
    pub step: usize,
    pub l_d: f64,
    pub l_g: f64,
    pub l_feat: f64,
    /// Negative ELBO of the refined decoder, batch-averaged.
    pub elbo: f64,
}

impl AdvMetrics {
    pub const CSV_HEADER: &'static str = "step,l_d,l_g,l_feat,elbo";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_d, self.l_g, self.l_feat, self.elbo)
    }

    pub fn write_csv<W: Write>(rows: &[AdvMetrics], mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in rows {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

/// VAE extended with the refiner, plus the discriminator.
pub struct AdvModel {
    pub vae: VaeModel,
    /// Refiner weights under `refiner.`, discriminator under `disc.`.
    pub params: ParamStore,
    pub refiner: Refiner,
    pub disc: Discriminator,
}

fn crop(t: &Tensor, b: usize, len: usize) -> Result<Tensor> {
    Ok(t.narrow(0, b, 1)?.narrow(1, 0, len)?)
}

impl AdvModel {
    pub fn new(vae: VaeModel, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(seed);
        let mut root = params.root();
        let refiner = Refiner::new(&mut root.pp("refiner"), vae.config.decoder.d_model, vae.config.d_mel)?;
        let disc = Discriminator::new(&mut root.pp("disc"))?;
        Ok(Self {
            vae,
            params,
            refiner,
            disc,
        })
    }

    /// Refreshes power-iteration state after weights change outside training.
    pub fn warm_up(&self) -> Result<()> {
        for c in self.refiner.convs().iter().chain(self.disc.convs()) {
            c.warm_up()?;
        }
        Ok(())
    }

    /// Refined decoder output `y_hat` for one utterance.
    pub fn decode(&self, z0: &LatentCode, a: &Alignment, frames: usize) -> Result<MelSpectrogram> {
        let (y, h) = self.vae.decode_with_hidden(z0, a, frames)?;
        let mask = SeqMask::new(&[frames], frames, false, &Device::Cpu)?;
        let y_hat = self.refiner.refine(&y, &h, &mask.frames, false)?;
        MelSpectrogram::new(unpad_row(&y_hat, 0, frames)?, 0.0)
    }

    /// `y_hat` from the posterior mean, or from `mu + sigma * noise`.
    pub fn reconstruct(&self, mel: &MelSpectrogram, a: &Alignment, noise: Option<&Array2<f64>>) -> Result<MelSpectrogram> {
        let p = self.vae.encode(mel, a)?;
        let z = match noise {
            Some(n) => crate::autoencoder::sample_posterior(&p, n)?,
            None => LatentCode { z0: p.mu.clone() },
        };
        self.decode(&z, a, mel.frames())
    }

    /// Frobenius norm of the refiner residual on one reconstruction.
    pub fn residual_norm(&self, mel: &MelSpectrogram, a: &Alignment) -> Result<f64> {
        let p = self.vae.encode(mel, a)?;
        let (_, h) = self.vae.decode_with_hidden(&LatentCode { z0: p.mu }, a, mel.frames())?;
        let r = self.refiner.residual(&h, false)?;
        Ok(r.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt())
    }

    /// Fraction of utterances the discriminator classifies correctly, with
    /// a mean score above 0.5 meaning "real". Fakes use posterior samples
    /// drawn from `seed`.
    pub fn discriminator_accuracy(&self, data: &[(&MelSpectrogram, &Alignment)], seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut correct = 0usize;
        for (mel, a) in data {
            let noise = standard_normal(&mut rng, a.len(), self.vae.config.d_latent)?;
            let fake = self.reconstruct(mel, a, Some(&crate::tensor::to_array2(&noise)?))?;
            let score = |m: &Array2<f64>| -> Result<f64> {
                let f = self.disc.features(&to_tensor(m)?.unsqueeze(0)?, false)?;
                Ok(f.last().expect("layers").mean_all()?.to_scalar::<f64>()?)
            };
            correct += (score(&mel.values)? > 0.5) as usize;
            correct += (score(&fake.values)? <= 0.5) as usize;
        }
        Ok(correct as f64 / (2 * data.len()).max(1) as f64)
    }
}

/// Alternating discriminator / generator updates.
pub struct AdvTrainer {
    pub model: AdvModel,
    config: AdvTrainConfig,
    opt_d: Optimizer,
    opt_g: Optimizer,
    drop: Dropout,
    rng: ChaCha8Rng,
    sampler: Option<EpochSampler>,
    step: usize,
}

impl AdvTrainer {
    pub fn new(model: AdvModel, config: AdvTrainConfig) -> Result<Self> {
        config.weights.validate()?;
        let opt_d = Optimizer::new(model.params.vars_with_prefix("disc."), &config.optimizer)?;
        let mut g_vars = model.params.vars_with_prefix("refiner.");
        for (name, var) in model.vae.params.iter() {
            let encoder = VaeModel::encoder_prefixes().iter().any(|p| name.starts_with(p));
            if config.train_encoder || !encoder {
                g_vars.push(var.clone());
            }
        }
        let opt_g = Optimizer::new(g_vars, &config.optimizer)?;
        let drop = Dropout::new(model.vae.config.dropout, config.seed ^ 0xADD);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17)),
            model,
            config,
            opt_d,
            opt_g,
            drop,
            sampler: None,
            step: 0,
        })
    }

    /// One discriminator step on `w_d * L_D`, then one generator step on
    /// `w_g * L_G + w_feat * L_feat + w_vae * L_VAE`.
    pub fn step(&mut self, data: &[(&MelSpectrogram, &Alignment)]) -> Result<AdvMetrics> {
        if data.is_empty() {
            return Err(Error::Config("no training data".into()));
        }
        let sampler = self.sampler.get_or_insert_with(|| EpochSampler::new(data.len()));
        let idx = sampler.next_batch(self.config.batch_size, &mut self.rng);
        let batch = VaeBatch::new(
            idx.iter().map(|i| &data[*i].0.values).collect(),
            idx.iter().map(|i| data[*i].1).collect(),
        )?;
        let noise = standard_normal(&mut self.rng, batch.total_phonemes(), self.model.vae.config.d_latent)?;
        let m = &self.model;
        let fwd = m.vae.forward_train(&batch, &noise, Some(&self.drop))?;
        let y_hat = m.refiner.refine(&fwd.y_tilde, &fwd.hidden, &fwd.frame_mask, true)?;
        let w = &self.config.weights;
        let b = fwd.lengths.len() as f64;

        let fake_detached = y_hat.detach();
        let mut l_d: Option<Tensor> = None;
        for (i, &len) in fwd.lengths.iter().enumerate() {
            let real = m.disc.features(&crop(&fwd.target, i, len)?, i == 0)?;
            let fake = m.disc.features(&crop(&fake_detached, i, len)?, false)?;
            let term = lsgan_d_loss(real.last().expect("layers"), fake.last().expect("layers"))?;
            l_d = Some(match l_d {
                None => term,
                Some(t) => (t + term)?,
            });
        }
        let l_d = (l_d.expect("nonempty batch") / b)?;
        let l_d_value = l_d.to_scalar::<f64>()?;
        if w.w_d > 0.0 {
            self.opt_d.backward_step(&(&l_d * w.w_d)?)?;
        }

        let mut l_g = Tensor::zeros((), crate::tensor::DTYPE, &Device::Cpu)?;
        let mut l_feat = l_g.clone();
        for (i, &len) in fwd.lengths.iter().enumerate() {
            let real = m.disc.features_detached(&crop(&fwd.target, i, len)?)?;
            let fake = m.disc.features_detached(&crop(&y_hat, i, len)?)?;
            l_g = (l_g + lsgan_g_loss(fake.last().expect("layers"))?)?;
            l_feat = (l_feat + feature_matching_loss(&real, &fake)?)?;
        }
        let l_g = (l_g / b)?;
        let l_feat = (l_feat / b)?;
        let elbo = m.vae.neg_elbo(&fwd, Some(&y_hat))?;
        let total = ((((&l_g * w.w_g)? + (&l_feat * w.w_feat)?)? + (&elbo * w.w_vae)?))?;
        let metrics = AdvMetrics {
            step: self.step,
            l_d: l_d_value,
            l_g: l_g.to_scalar::<f64>()?,
            l_feat: l_feat.to_scalar::<f64>()?,
            elbo: elbo.to_scalar::<f64>()?,
        };
        self.opt_g.backward_step(&total)?;
        for c in self.model.refiner.convs().iter().chain(self.model.disc.convs()) {
            c.refresh()?;
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Runs the configured number of steps.
    pub fn train(&mut self, data: &[(&MelSpectrogram, &Alignment)]) -> Result<Vec<AdvMetrics>> {
        (0..self.config.steps).map(|_| self.step(data)).collect()
    }

    pub fn into_model(self) -> AdvModel {
        self.model
    }
}
