use ndarray::Array2;

use crate::aligner::Alignment;
use crate::error::{Error, Result};

/// Diagonal Gaussian posterior; `log_sigma` is the log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mu: Array2<f64>,
    pub log_sigma: Array2<f64>,
}

impl PosteriorParams {
    pub fn new(mu: Array2<f64>, log_sigma: Array2<f64>) -> Result<Self> {
        if mu.dim() != log_sigma.dim() {
            return Err(Error::Shape(format!(
                "mu {:?} vs log_sigma {:?}",
                mu.dim(),
                log_sigma.dim()
            )));
        }
        if mu.iter().chain(log_sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite posterior parameters".into()));
        }
        Ok(Self { mu, log_sigma })
    }

    pub fn sigma(&self) -> Array2<f64> {
        self.log_sigma.mapv(f64::exp)
    }

    pub fn rows(&self) -> usize {
        self.mu.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z0: Array2<f64>,
}

/// Rows of `e` at the (1-based) spike frames.
pub fn gather_at_spikes(e: &Array2<f64>, a: &Alignment) -> Result<Array2<f64>> {
    a.check_frames(e.nrows())?;
    Ok(e.select(ndarray::Axis(0), &a.spike_indices()))
}

/// Reparameterized draw `mu + sigma * noise`.
pub fn sample_posterior(p: &PosteriorParams, noise: &Array2<f64>) -> Result<LatentCode> {
    if noise.dim() != p.mu.dim() {
        return Err(Error::Shape(format!(
            "noise {:?} vs posterior {:?}",
            noise.dim(),
            p.mu.dim()
        )));
    }
    Ok(LatentCode {
        z0: &p.mu + &(p.sigma() * noise),
    })
}

/// `KL(N(mu, sigma^2) || N(0, 1))` summed over every cell.
pub fn kl_to_standard_normal(p: &PosteriorParams) -> f64 {
    p.mu
        .iter()
        .zip(p.log_sigma.iter())
        .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
        .sum()
}

/// `N x D` matrix with row `a_i` equal to row `i` of `z0` and zeros elsewhere.
pub fn upsample(z0: &LatentCode, a: &Alignment, frames: usize) -> Result<Array2<f64>> {
    if z0.z0.nrows() != a.len() {
        return Err(Error::Shape(format!(
            "{} latent rows for {} spikes",
            z0.z0.nrows(),
            a.len()
        )));
    }
    a.check_frames(frames)?;
    let mut out = Array2::zeros((frames, z0.z0.ncols()));
    for (i, j) in a.spike_indices().into_iter().enumerate() {
        out.row_mut(j).assign(&z0.z0.row(i));
    }
    Ok(out)
}

/// Negative log of the factorized Laplace density with scale `b`:
/// `sum log(2b) + |y - y_hat| / b`.
pub fn laplace_nll(y: &Array2<f64>, y_hat: &Array2<f64>, b: f64) -> Result<f64> {
    if !(b > 0.0) {
        return Err(Error::Config(format!("Laplace scale must be positive, got {b}")));
    }
    if y.dim() != y_hat.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", y.dim(), y_hat.dim())));
    }
    let log2b = (2.0 * b).ln();
    Ok(y.iter().zip(y_hat.iter()).map(|(a, c)| log2b + (a - c).abs() / b).sum())
}

/// `(KL, Laplace NLL)`; their sum is the negative ELBO for one draw.
pub fn elbo_terms(p: &PosteriorParams, y: &Array2<f64>, y_hat: &Array2<f64>, b: f64) -> Result<(f64, f64)> {
    Ok((kl_to_standard_normal(p), laplace_nll(y, y_hat, b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn post(mu: f64, ls: f64, m: usize, d: usize) -> PosteriorParams {
        PosteriorParams::new(Array2::from_elem((m, d), mu), Array2::from_elem((m, d), ls)).unwrap()
    }

    #[test]
    fn gather_picks_spike_rows() {
        let e = Array2::from_shape_fn((4, 2), |(i, j)| (10 * i + j) as f64);
        let a = Alignment::from_spikes(&[1, 3]).unwrap();
        let g = gather_at_spikes(&e, &a).unwrap();
        assert_eq!(g.row(0).to_vec(), vec![0.0, 1.0]);
        assert_eq!(g.row(1).to_vec(), vec![20.0, 21.0]);
        let too_long = Alignment::from_spikes(&[5]).unwrap();
        assert!(matches!(gather_at_spikes(&e, &too_long), Err(Error::AlignmentExceedsFrames { .. })));
    }

    #[test]
    fn pointwise_encoder_ignores_non_spike_frames() {
        // A per-frame map commutes with permutations of frames it never gathers.
        let stub = |y: &Array2<f64>| y.mapv(|v| (v * 1.7).tanh());
        let y = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let a = Alignment::from_spikes(&[2, 5]).unwrap();
        let mut permuted = y.clone();
        // swap frames 1, 3 and 6 around (0-based 0, 2, 5)
        for (i, j) in [(0usize, 2usize), (2, 5)] {
            let (ri, rj) = (permuted.row(i).to_owned(), permuted.row(j).to_owned());
            permuted.row_mut(i).assign(&rj);
            permuted.row_mut(j).assign(&ri);
        }
        assert_eq!(
            gather_at_spikes(&stub(&y), &a).unwrap(),
            gather_at_spikes(&stub(&permuted), &a).unwrap()
        );
    }

    #[test]
    fn sample_posterior_special_cases() {
        let p = PosteriorParams::new(
            Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64),
            Array2::from_elem((2, 3), 0.3),
        )
        .unwrap();
        let zero = Array2::zeros((2, 3));
        assert_eq!(sample_posterior(&p, &zero).unwrap().z0, p.mu);
        let p0 = PosteriorParams::new(p.mu.clone(), Array2::zeros((2, 3))).unwrap();
        let noise = Array2::from_elem((2, 3), 0.25);
        assert_eq!(sample_posterior(&p0, &noise).unwrap().z0, &p.mu + 0.25);
    }

    #[test]
    fn posterior_moments_by_monte_carlo() {
        let (mu, ls) = (0.7, -0.4);
        let p = post(mu, ls, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                sample_posterior(&p, &Array2::from_elem((1, 1), e)).unwrap().z0[[0, 0]]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sigma = f64::exp(ls);
        let se_mean = sigma / (n as f64).sqrt();
        let se_std = sigma / (2.0 * n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean);
        assert!((var.sqrt() - sigma).abs() < 3.0 * se_std);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_standard_normal(&post(0.0, 0.0, 3, 4)), 0.0);
        assert!((kl_to_standard_normal(&post(1.0, 0.0, 1, 1)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn upsample_examples() {
        let z = LatentCode { z0: Array2::from_elem((1, 2), 3.0) };
        let a = Alignment::from_spikes(&[2]).unwrap();
        let up = upsample(&z, &a, 3).unwrap();
        assert_eq!(up, ndarray::array![[0.0, 0.0], [3.0, 3.0], [0.0, 0.0]]);
        assert!(upsample(&z, &a, 1).is_err());
        let a2 = Alignment::from_spikes(&[1, 2]).unwrap();
        assert!(matches!(upsample(&z, &a2, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn laplace_examples() {
        let y = Array2::from_elem((2, 2), 0.3);
        assert_eq!(laplace_nll(&y, &y, 0.5).unwrap(), 0.0);
        let one = laplace_nll(&ndarray::array![[1.0]], &ndarray::array![[0.0]], 1.0).unwrap();
        assert!((one - (2f64.ln() + 1.0)).abs() < 1e-15);
        assert!((one - 1.6931).abs() < 1e-4);
        assert!(laplace_nll(&y, &y, 0.0).is_err());
        assert!(laplace_nll(&y, &y, -1.0).is_err());
    }

    #[test]
    fn perfect_reconstruction_leaves_only_kl() {
        let p = post(0.4, -0.2, 2, 3);
        let y = Array2::from_elem((5, 4), -1.0);
        let (kl, nll) = elbo_terms(&p, &y, &y, 0.5).unwrap();
        assert_eq!(nll, 0.0);
        assert_eq!(kl + nll, kl_to_standard_normal(&p));
    }

    proptest! {
        #[test]
        fn scatter_gather_round_trip(gaps in prop::collection::vec(1usize..5, 1..8), extra in 0usize..4, d in 1usize..5, seed in any::<u64>()) {
            let spikes: Vec<usize> = gaps.iter().scan(0, |a, g| { *a += g; Some(*a) }).collect();
            let a = Alignment::from_spikes(&spikes).unwrap();
            let n = a.total_frames() + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = LatentCode { z0: Array2::from_shape_fn((a.len(), d), |_| rng.gen_range(-2.0..2.0)) };
            let up = upsample(&z, &a, n).unwrap();
            prop_assert_eq!(up.dim(), (n, d));
            prop_assert_eq!(gather_at_spikes(&up, &a).unwrap(), z.z0.clone());
            let nonzero = up.rows().into_iter().filter(|r| r.iter().any(|v| *v != 0.0)).count();
            prop_assert!(nonzero <= a.len());
        }

        #[test]
        fn kl_nonnegative(mu in -3.0f64..3.0, ls in -3.0f64..3.0) {
            prop_assert!(kl_to_standard_normal(&post(mu, ls, 1, 1)) >= 0.0);
        }

        #[test]
        fn laplace_identity_and_monotone(n in 1usize..6, d in 1usize..6, b in 0.01f64..3.0, delta in 0.0f64..2.0) {
            let y = Array2::from_elem((n, d), 0.1);
            let base = laplace_nll(&y, &y, b).unwrap();
            let expect = (n * d) as f64 * (2.0 * b).ln();
            prop_assert!((base - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            let mut y2 = y.clone();
            y2[[0, 0]] += delta + 1e-3;
            let worse = laplace_nll(&y, &y2, b).unwrap();
            prop_assert!(worse > base);
        }
    }

    #[test]
    fn kl_zero_only_at_standard_normal() {
        for (mu, ls) in [(1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
            assert!(kl_to_standard_normal(&post(mu, ls, 1, 1)) > 1e-9 * 0.1);
        }
        assert!(kl_to_standard_normal(&post(0.0, 0.0, 1, 1)).abs() < 1e-9);
    }
}
