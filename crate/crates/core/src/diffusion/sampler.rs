use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::score::{Condition, ScoreFunction};
use super::sde::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::to_array2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Reverse-time SDE, Euler-Maruyama.
    Em,
    /// Probability-flow ODE, Euler.
    Ode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub steps: usize,
    pub t_eps: f64,
    pub kind: SamplerKind,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            t_eps: 1e-3,
            kind: SamplerKind::Em,
        }
    }
}

impl SamplerOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 1.0) {
            return Err(Error::Config(format!("t_eps must lie in (0, 1), got {}", self.t_eps)));
        }
        Ok(())
    }

    /// Uniform grid from 1 down to `t_eps`, `steps + 1` points.
    pub fn grid(&self) -> Vec<f64> {
        let dt = (1.0 - self.t_eps) / self.steps as f64;
        (0..=self.steps).map(|k| 1.0 - k as f64 * dt).collect()
    }
}

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Result<Tensor> {
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, (rows, cols), &Device::Cpu)?)
}

/// Integrates from `x1` at `t = 1` down to `t_eps`. `score(x, t, dt)` is
/// queried once per step. EM steps add Brownian increments drawn from `rng`
/// on every step but the last.
pub fn integrate_reverse<R: Rng>(
    x1: Tensor,
    schedule: &NoiseSchedule,
    opts: &SamplerOptions,
    rng: &mut R,
    score: &mut dyn FnMut(&Tensor, f64, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    opts.validate()?;
    let grid = opts.grid();
    let (rows, cols) = x1.dims2()?;
    let mut x = x1;
    for k in 0..opts.steps {
        let (t, dt) = (grid[k], grid[k] - grid[k + 1]);
        let beta = schedule.beta(t);
        let s = score(&x, t, dt)?.detach();
        let drift = match opts.kind {
            SamplerKind::Em => ((&x * (0.5 * beta))? + (s * beta)?)?,
            SamplerKind::Ode => ((&x * (0.5 * beta))? + (s * (0.5 * beta))?)?,
        };
        x = (x + (drift * dt)?)?;
        if opts.kind == SamplerKind::Em && k + 1 < opts.steps {
            x = (x + (normal_tensor(rng, rows, cols)? * (beta * dt).sqrt())?)?;
        }
    }
    let v = x.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("sampler diverged".into()));
    }
    Ok(x)
}

/// Reverse SDE from `x_1 ~ N(0, I)`.
pub fn sample_em<R: Rng>(f: &dyn ScoreFunction, cond: &Condition, steps: usize, rng: &mut R) -> Result<Array2<f64>> {
    let opts = SamplerOptions {
        steps,
        kind: SamplerKind::Em,
        ..Default::default()
    };
    sample(f, cond, &opts, rng)
}

/// Probability-flow ODE from `x_1 ~ N(0, I)`.
pub fn sample_ode<R: Rng>(f: &dyn ScoreFunction, cond: &Condition, steps: usize, rng: &mut R) -> Result<Array2<f64>> {
    let opts = SamplerOptions {
        steps,
        kind: SamplerKind::Ode,
        ..Default::default()
    };
    sample(f, cond, &opts, rng)
}

pub fn sample<R: Rng>(f: &dyn ScoreFunction, cond: &Condition, opts: &SamplerOptions, rng: &mut R) -> Result<Array2<f64>> {
    opts.validate()?;
    let x1 = normal_tensor(rng, cond.rows(), f.state_dim())?;
    let x = integrate_reverse(x1, f.schedule(), opts, rng, &mut |x, t, _| f.score(x, t, cond))?;
    to_array2(&x)
}

/// Deterministic reverse ODE from a given `x_1`.
pub fn ode_from(f: &dyn ScoreFunction, cond: &Condition, x1: &Array2<f64>, steps: usize) -> Result<Array2<f64>> {
    let opts = SamplerOptions {
        steps,
        kind: SamplerKind::Ode,
        ..Default::default()
    };
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    let x = integrate_reverse(crate::tensor::to_tensor(x1)?, f.schedule(), &opts, &mut unused, &mut |x, t, _| {
        f.score(x, t, cond)
    })?;
    to_array2(&x)
}

/// Probability-flow ODE forward from `t_eps` to 1, mapping data to noise.
pub fn ode_encode(f: &dyn ScoreFunction, cond: &Condition, x0: &Array2<f64>, steps: usize) -> Result<Array2<f64>> {
    let opts = SamplerOptions {
        steps,
        kind: SamplerKind::Ode,
        ..Default::default()
    };
    opts.validate()?;
    let mut grid = opts.grid();
    grid.reverse();
    let schedule = f.schedule();
    let mut x = crate::tensor::to_tensor(x0)?;
    for k in 0..steps {
        let (t, dt) = (grid[k], grid[k + 1] - grid[k]);
        let beta = schedule.beta(t);
        let s = f.score(&x, t, cond)?;
        let drift = ((&x * (-0.5 * beta))? - (s * (0.5 * beta))?)?;
        x = (x + (drift * dt)?)?;
    }
    to_array2(&x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::score::GaussianScore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss(mean: f64, std: f64) -> GaussianScore {
        GaussianScore {
            mean,
            std,
            dim: 3,
            schedule: NoiseSchedule::default(),
        }
    }

    fn moments(x: &Array2<f64>) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn em_standard_normal_oracle() {
        let g = gauss(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = sample_em(&g, &Condition::unconditional(4000), 100, &mut rng).unwrap();
        let (m, v) = moments(&x);
        assert!(m.abs() < 0.03, "mean {m}");
        assert!((v - 1.0).abs() < 0.05, "var {v}");
    }

    #[test]
    fn em_point_mass_oracle() {
        let g = gauss(1.5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = sample_em(&g, &Condition::unconditional(1000), 100, &mut rng).unwrap();
        let (m, v) = moments(&x);
        assert!((m - 1.5).abs() < 0.01, "mean {m}");
        assert!(v.sqrt() < 0.05, "std {}", v.sqrt());
    }

    #[test]
    fn seeded_determinism_and_zero_steps() {
        let g = gauss(0.2, 0.5);
        let cond = Condition::unconditional(3);
        let a = sample_em(&g, &cond, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_em(&g, &cond, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(sample_ode(&g, &cond, 0, &mut ChaCha8Rng::seed_from_u64(9)), Err(Error::Config(_))));
    }

    #[test]
    fn ode_round_trip() {
        let g = gauss(0.5, 0.8);
        let cond = Condition::unconditional(2);
        let x0 = ndarray::array![[0.3, -0.9, 1.7], [0.0, 0.5, -0.2]];
        let x1 = ode_encode(&g, &cond, &x0, 500).unwrap();
        let back = ode_from(&g, &cond, &x1, 500).unwrap();
        let rmse = ((&back - &x0).mapv(|v| v * v).sum() / x0.len() as f64).sqrt();
        assert!(rmse < 1e-2, "rmse {rmse}");
    }

    #[test]
    fn ode_matches_data_moments() {
        let g = gauss(-0.4, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = sample_ode(&g, &Condition::unconditional(3000), 100, &mut rng).unwrap();
        let (m, v) = moments(&x);
        assert!((m + 0.4).abs() < 0.03, "mean {m}");
        assert!((v - 0.36).abs() < 0.03, "var {v}");
    }
}
