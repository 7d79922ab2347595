use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::score::{Condition, ScoreConfig, ScoreFunction, ScoreModel};
use super::sde::{dequantize_durations, true_transition_score, DurationCodecConfig, NoiseSchedule};
use crate::aligner::{Alignment, TrainReport};
use crate::autoencoder::{PosteriorParams, VaeModel};
use crate::batch::{pad_ids, pad_matrices, EpochSampler};
use crate::data::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{Dropout, Optimizer, OptimizerConfig, SeqMask};
use crate::tensor::{to_array2, to_tensor};

/// One utterance in latent form: durations plus the frozen posterior.
#[derive(Debug, Clone)]
pub struct DiffusionExample {
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub posterior: PosteriorParams,
    pub speaker: usize,
}

/// `[l; z]` with the duration channel first.
pub fn join_state(l: &[f64], z: &Array2<f64>) -> Result<Array2<f64>> {
    if l.len() != z.nrows() {
        return Err(Error::Shape(format!("{} durations for {} latent rows", l.len(), z.nrows())));
    }
    let col = Array2::from_shape_vec((l.len(), 1), l.to_vec()).expect("column");
    Ok(concatenate(Axis(1), &[col.view(), z.view()]).expect("same rows"))
}

/// Inverse of [`join_state`].
pub fn split_state(x: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    (x.column(0).to_vec(), x.slice(ndarray::s![.., 1..]).to_owned())
}

impl DiffusionExample {
    pub fn from_vae(
        vae: &VaeModel,
        mel: &MelSpectrogram,
        phonemes: &[usize],
        alignment: &Alignment,
        speaker: usize,
    ) -> Result<Self> {
        if phonemes.len() != alignment.len() {
            return Err(Error::Shape(format!(
                "{} phonemes for {} spikes",
                phonemes.len(),
                alignment.len()
            )));
        }
        Ok(Self {
            phonemes: phonemes.to_vec(),
            durations: alignment.durations.clone(),
            posterior: vae.encode(mel, alignment)?,
            speaker,
        })
    }

    /// `[l; mu]` with midpoint dequantization.
    pub fn mean_state(&self, codec: &DurationCodecConfig) -> Result<Array2<f64>> {
        let l = dequantize_durations(&self.durations, &vec![0.5; self.durations.len()], codec)?;
        join_state(&l, &self.posterior.mu)
    }

    /// `[1; sigma]`.
    pub fn sigma_state(&self) -> Result<Array2<f64>> {
        join_state(&vec![1.0; self.durations.len()], &self.posterior.sigma())
    }

    /// `[l(d - u); mu + sigma * e]` with fresh `u` and `e`.
    pub fn sample_state<R: Rng>(&self, codec: &DurationCodecConfig, rng: &mut R) -> Result<Array2<f64>> {
        let m = self.durations.len();
        let u: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let l = dequantize_durations(&self.durations, &u, codec)?;
        let noise = Array2::from_shape_fn(self.posterior.mu.dim(), |_| rng.sample(rand_distr::StandardNormal));
        let z = crate::autoencoder::sample_posterior(&self.posterior, &noise)?;
        join_state(&l, &z.z0)
    }
}

/// Monte Carlo `lambda_t ||s(x_t) - grad log p_0t(x_t | x0)||^2`, averaged
/// over items, `t ~ U[t_eps, 1]`, `lambda_t = 1 - abar(t)`.
pub fn dsm_loss<R: Rng>(
    f: &dyn ScoreFunction,
    batch: &[(Array2<f64>, Condition)],
    t_eps: f64,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let schedule = f.schedule();
    let mut total = 0.0;
    for (x0, cond) in batch {
        let t = rng.gen_range(t_eps..=1.0);
        let eps = Array2::from_shape_fn(x0.dim(), |_| rng.sample(rand_distr::StandardNormal));
        let x_t = super::sde::perturb(x0, t, &eps, schedule)?;
        let target = true_transition_score(&x_t, x0, t, schedule)?;
        let s = to_array2(&f.score(&to_tensor(&x_t)?, t, cond)?)?;
        let lambda = 1.0 - schedule.alpha_bar(t)?;
        total += lambda * (&s - &target).mapv(|v| v * v).sum();
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("score-matching loss is {loss}")));
    }
    Ok(loss)
}

/// Fixed draws for one mini-batch of [`dsm_batch_loss`].
pub struct DsmBatch<'a> {
    pub states: Vec<Array2<f64>>,
    pub phonemes: Vec<&'a [usize]>,
    /// Reference states for the speaker encoder, one per item.
    pub references: Option<Vec<Array2<f64>>>,
    pub times: Vec<f64>,
    pub noise: Vec<Array2<f64>>,
}

/// Differentiable score-matching loss of the network. With noise
/// prediction `s = -eps_hat / sqrt(1 - abar)`, the weighted residual
/// `lambda_t ||s - s_true||^2` equals `||eps_hat - eps||^2`.
pub fn dsm_batch_loss(model: &ScoreModel, batch: &DsmBatch<'_>, drop: Option<&Dropout>) -> Result<Tensor> {
    let schedule = &model.config.schedule;
    let b = batch.states.len();
    let mut noisy = Vec::with_capacity(b);
    for ((x0, eps), &t) in batch.states.iter().zip(&batch.noise).zip(&batch.times) {
        noisy.push(super::sde::perturb(x0, t, eps, schedule)?);
    }
    let dev = Device::Cpu;
    let (x_t, lengths) = pad_matrices(&noisy.iter().collect::<Vec<_>>(), &dev)?;
    let (eps, _) = pad_matrices(&batch.noise.iter().collect::<Vec<_>>(), &dev)?;
    let (ids, _) = pad_ids(&batch.phonemes, &dev)?;
    let m = x_t.dim(1)?;
    let mask = SeqMask::new(&lengths, m, false, &dev)?;
    let features = model.encode_phonemes(&ids, &mask, drop)?;
    let speaker = match &batch.references {
        Some(refs) => {
            let (r, rl) = pad_matrices(&refs.iter().collect::<Vec<_>>(), &dev)?;
            Some(model.speaker_embed_batch(&r, &rl, drop)?)
        }
        None => None,
    };
    let eps_hat = model.predict_noise(&x_t, &batch.times, &features, speaker.as_ref(), &mask, drop)?;
    Ok(((eps_hat - eps)?.sqr()?.broadcast_mul(&mask.frames)?.sum_all()? / b as f64)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub t_eps: f64,
    pub optimizer: OptimizerConfig,
    /// Decay of the weight moving average used for sampling; 0 disables it.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            t_eps: 1e-3,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            ema_decay: 0.995,
            seed: 0,
        }
    }
}

/// Trains the score network on the latent corpus. Speaker-conditioned
/// models draw each item's reference from another utterance of the same
/// speaker when one exists.
pub fn train_diffusion(
    examples: &[DiffusionExample],
    config: ScoreConfig,
    train: &DiffusionTrainConfig,
) -> Result<(ScoreModel, TrainReport)> {
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let model = ScoreModel::new(config, train.seed)?;
    let drop = Dropout::new(model.config.dropout, train.seed ^ 0xD1F);
    let mut opt = Optimizer::new(model.params.all_vars(), &train.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(3));
    let mut sampler = EpochSampler::new(examples.len());
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_speaker.entry(e.speaker).or_default().push(i);
    }
    let codec = model.config.codec;
    let mut ema: Option<Vec<Tensor>> = None;
    let vars = model.params.all_vars();
    let mut report = TrainReport::default();
    for _ in 0..train.steps {
        let idx = sampler.next_batch(train.batch_size, &mut rng);
        let mut states = Vec::with_capacity(idx.len());
        let mut noise = Vec::with_capacity(idx.len());
        let mut times = Vec::with_capacity(idx.len());
        let mut refs = Vec::new();
        for &i in &idx {
            let e = &examples[i];
            let x0 = e.sample_state(&codec, &mut rng)?;
            noise.push(Array2::from_shape_fn(x0.dim(), |_| rng.sample(rand_distr::StandardNormal)));
            times.push(rng.gen_range(train.t_eps..=1.0));
            states.push(x0);
            if model.has_speaker_encoder() {
                let pool = &by_speaker[&e.speaker];
                let j = if pool.len() > 1 {
                    loop {
                        let j = pool[rng.gen_range(0..pool.len())];
                        if j != i {
                            break j;
                        }
                    }
                } else {
                    i
                };
                refs.push(examples[j].mean_state(&codec)?);
            }
        }
        let batch = DsmBatch {
            phonemes: idx.iter().map(|&i| examples[i].phonemes.as_slice()).collect(),
            states,
            references: model.has_speaker_encoder().then_some(refs),
            times,
            noise,
        };
        let loss = dsm_batch_loss(&model, &batch, Some(&drop))?;
        let value = loss.to_scalar::<f64>()?;
        opt.backward_step(&loss)?;
        report.losses.push(value);
        if train.ema_decay > 0.0 {
            ema = Some(match ema {
                None => vars.iter().map(|v| v.as_tensor().detach().copy()).collect::<candle_core::Result<_>>()?,
                Some(prev) => prev
                    .iter()
                    .zip(&vars)
                    .map(|(e, v)| ((e * train.ema_decay)? + (v.as_tensor() * (1.0 - train.ema_decay))?).map(|t| t.detach()))
                    .collect::<candle_core::Result<_>>()?,
            });
        }
    }
    if let Some(ema) = ema {
        for (v, e) in vars.iter().zip(&ema) {
            v.set(e)?;
        }
    }
    Ok((model, report))
}

/// `1 - abar(t)` weighting helper for callers building their own losses.
pub fn lambda(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    Ok(1.0 - schedule.alpha_bar(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::score::GaussianScore;
    use crate::nn::{check_param_gradients, ConformerConfig};

    /// Score of the transition density from one known `x0`.
    struct TrueScore {
        x0: Array2<f64>,
        schedule: NoiseSchedule,
        offset: f64,
    }

    impl ScoreFunction for TrueScore {
        fn state_dim(&self) -> usize {
            self.x0.ncols()
        }
        fn schedule(&self) -> &NoiseSchedule {
            &self.schedule
        }
        fn score(&self, x: &Tensor, t: f64, _c: &Condition) -> Result<Tensor> {
            let s = true_transition_score(&to_array2(x)?, &self.x0, t, &self.schedule)?;
            to_tensor(&(s + self.offset))
        }
    }

    #[test]
    fn true_score_stub_has_zero_loss() {
        let x0 = ndarray::array![[0.3, -1.0, 2.0], [1.0, 0.0, 0.5]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let exact = TrueScore {
            x0: x0.clone(),
            schedule: NoiseSchedule::default(),
            offset: 0.0,
        };
        let batch = vec![(x0.clone(), Condition::unconditional(2))];
        assert!(dsm_loss(&exact, &batch, 1e-3, &mut rng).unwrap() < 1e-20);
        let off = TrueScore { offset: 0.1, ..exact };
        assert!(dsm_loss(&off, &batch, 1e-3, &mut rng).unwrap() > 0.0);
    }

    #[test]
    fn zero_model_loss_is_state_size() {
        // score 0 everywhere: lambda ||s_true||^2 = ||eps||^2, mean M * S
        struct Zero(NoiseSchedule);
        impl ScoreFunction for Zero {
            fn state_dim(&self) -> usize {
                3
            }
            fn schedule(&self) -> &NoiseSchedule {
                &self.0
            }
            fn score(&self, x: &Tensor, _t: f64, _c: &Condition) -> Result<Tensor> {
                Ok(x.zeros_like()?)
            }
        }
        let x0 = Array2::from_elem((4, 3), 0.7);
        let batch: Vec<_> = (0..2000).map(|_| (x0.clone(), Condition::unconditional(4))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = dsm_loss(&Zero(NoiseSchedule::default()), &batch, 1e-3, &mut rng).unwrap();
        // ||eps||^2 ~ chi^2_12: sd sqrt(24), standard error sqrt(24 / 2000)
        assert!((l - 12.0).abs() < 3.0 * (24.0f64 / 2000.0).sqrt(), "{l}");
    }

    #[test]
    fn gaussian_score_loss_is_finite() {
        let g = GaussianScore {
            mean: 0.0,
            std: 1.0,
            dim: 2,
            schedule: NoiseSchedule::default(),
        };
        let batch = vec![(Array2::zeros((3, 2)), Condition::unconditional(3))];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(dsm_loss(&g, &batch, 1e-3, &mut rng).unwrap().is_finite());
    }

    fn tiny_config() -> ScoreConfig {
        let c = ConformerConfig {
            layers: 1,
            heads: 1,
            d_model: 4,
            kernel: 3,
            ff_mult: 1,
            look_ahead_only: false,
            attention_window: None,
        };
        let mut cfg = ScoreConfig::desk(3, 2);
        cfg.phoneme_encoder = c.clone();
        cfg.estimator = c.clone();
        cfg.speaker_encoder = Some(c);
        cfg.time_dim = 4;
        cfg.dropout = 0.0;
        cfg
    }

    #[test]
    fn batch_loss_gradient_matches_finite_differences() {
        let model = ScoreModel::new(tiny_config(), 5).unwrap();
        // Nonzero modulation so the time path is exercised.
        let film = model.params.get("time_film.weight").unwrap();
        film.set(&Tensor::full(0.1f64, film.shape(), &Device::Cpu).unwrap()).unwrap();
        let w = [0usize, 2];
        let batch = DsmBatch {
            states: vec![ndarray::array![[0.4, 0.1, -0.3], [1.2, -0.5, 0.8]]],
            phonemes: vec![&w],
            references: Some(vec![ndarray::array![[0.2, 0.0, 0.1]]]),
            times: vec![0.35],
            noise: vec![ndarray::array![[0.3, -1.1, 0.6], [-0.2, 0.9, 1.4]]],
        };
        let report = check_param_gradients(&model.params, 3, 1e-5, &|| dsm_batch_loss(&model, &batch, None)).unwrap();
        assert!(report.relative_error() < 1e-3, "{}", report.relative_error());
    }

    #[test]
    fn batch_loss_agrees_with_generic_loss() {
        let mut cfg = tiny_config();
        cfg.speaker_encoder = None;
        let model = ScoreModel::new(cfg, 6).unwrap();
        let w = [1usize, 0, 2];
        let x0 = ndarray::array![[0.4, 0.1, -0.3], [1.2, -0.5, 0.8], [0.0, 0.3, 0.3]];
        let eps = ndarray::array![[0.3, -1.1, 0.6], [-0.2, 0.9, 1.4], [1.0, 0.0, -0.7]];
        let t = 0.6;
        let batch = DsmBatch {
            states: vec![x0.clone()],
            phonemes: vec![&w],
            references: None,
            times: vec![t],
            noise: vec![eps.clone()],
        };
        let tensor_loss = dsm_batch_loss(&model, &batch, None).unwrap().to_scalar::<f64>().unwrap();
        let s = &model.config.schedule;
        let x_t = super::super::sde::perturb(&x0, t, &eps, s).unwrap();
        let cond = model.prepare(&w, None).unwrap();
        let score = to_array2(&model.score(&to_tensor(&x_t).unwrap(), t, &cond).unwrap()).unwrap();
        let target = true_transition_score(&x_t, &x0, t, s).unwrap();
        let direct = lambda(s, t).unwrap() * (&score - &target).mapv(|v| v * v).sum();
        assert!((tensor_loss - direct).abs() < 1e-9 * direct.max(1.0), "{tensor_loss} vs {direct}");
    }

    #[test]
    fn join_split_round_trip() {
        let z = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let x = join_state(&[0.5, 0.7], &z).unwrap();
        assert_eq!(x, ndarray::array![[0.5, 1.0, 2.0], [0.7, 3.0, 4.0]]);
        let (l, z2) = split_state(&x);
        assert_eq!(l, vec![0.5, 0.7]);
        assert_eq!(z2, z);
    }
}
