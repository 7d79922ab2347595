use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `l = ln(d - u + c0) + c1` and its inverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationCodecConfig {
    pub c0: f64,
    pub c1: f64,
    /// Upper clamp on decoded durations, in frames.
    #[serde(default = "default_max_duration")]
    pub max_duration: usize,
}

fn default_max_duration() -> usize {
    256
}

impl Default for DurationCodecConfig {
    fn default() -> Self {
        Self {
            c0: 1.0,
            c1: 0.0,
            max_duration: default_max_duration(),
        }
    }
}

impl DurationCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c0 > 0.0) || !self.c1.is_finite() || self.max_duration == 0 {
            return Err(Error::Config(format!("duration codec needs c0 > 0, finite c1 and a positive cap, got {self:?}")));
        }
        Ok(())
    }

    /// Same `c0`, with `c1` chosen so the dequantized log-durations of the
    /// given corpus (at midpoint `u = 0.5`) have zero mean.
    pub fn refit_c1(&self, durations: &[usize]) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::Config("cannot refit c1 on no durations".into()));
        }
        let mean = durations
            .iter()
            .map(|&d| (d as f64 - 0.5 + self.c0).ln())
            .sum::<f64>()
            / durations.len() as f64;
        Ok(Self { c1: -mean, ..*self })
    }
}

pub fn dequantize_durations(d: &[usize], u: &[f64], cfg: &DurationCodecConfig) -> Result<Vec<f64>> {
    if d.len() != u.len() {
        return Err(Error::Shape(format!("{} durations but {} offsets", d.len(), u.len())));
    }
    d.iter()
        .zip(u)
        .map(|(&d, &u)| {
            if d == 0 || !(0.0..1.0).contains(&u) {
                return Err(Error::Config(format!("need d >= 1 and u in [0,1), got d={d}, u={u}")));
            }
            Ok((d as f64 - u + cfg.c0).ln() + cfg.c1)
        })
        .collect()
}

/// `d = clamp(ceil(exp(l - c1) - c0), 1, max_duration)`; NaN clamps like a
/// very negative `l`.
pub fn quantize_durations(l: &[f64], cfg: &DurationCodecConfig) -> Vec<usize> {
    l.iter()
        .map(|&l| {
            let d = (l - cfg.c1).exp() - cfg.c0;
            if d > 1.0 {
                (d.ceil().min(cfg.max_duration as f64) as usize).max(1)
            } else {
                1
            }
        })
        .collect()
}

/// Linear `beta(t) = beta_min + t (beta_max - beta_min)` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::Config(format!("need 0 < beta_min <= beta_max, got {self:?}")));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `int_0^t beta(s) ds`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok((-self.integral(t)).exp())
    }
}

/// `sqrt(abar) x0 + sqrt(1 - abar) eps`.
pub fn perturb(x0: &Array2<f64>, t: f64, eps: &Array2<f64>, schedule: &NoiseSchedule) -> Result<Array2<f64>> {
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.dim(), eps.dim())));
    }
    let a = schedule.alpha_bar(t)?;
    Ok(x0 * a.sqrt() + eps * (1.0 - a).sqrt())
}

/// `-(x_t - sqrt(abar) x0) / (1 - abar)`.
pub fn true_transition_score(
    x_t: &Array2<f64>,
    x0: &Array2<f64>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x0.dim() != x_t.dim() {
        return Err(Error::Shape(format!("x0 {:?} vs x_t {:?}", x0.dim(), x_t.dim())));
    }
    let a = schedule.alpha_bar(t)?;
    if t <= 0.0 || 1.0 - a <= 0.0 {
        return Err(Error::DegenerateTransition);
    }
    Ok((x_t - &(x0 * a.sqrt())) * (-1.0 / (1.0 - a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dequantize_examples() {
        let c = DurationCodecConfig::default();
        assert!((dequantize_durations(&[1], &[0.5], &c).unwrap()[0] - 1.5f64.ln()).abs() < 1e-15);
        assert!((dequantize_durations(&[1], &[0.0], &c).unwrap()[0] - 2f64.ln()).abs() < 1e-15);
        assert!(dequantize_durations(&[0], &[0.0], &c).is_err());
        assert!(dequantize_durations(&[2], &[1.0], &c).is_err());
    }

    #[test]
    fn quantize_examples() {
        let c = DurationCodecConfig::default();
        assert_eq!(quantize_durations(&[1.5f64.ln()], &c), vec![1]);
        assert_eq!(quantize_durations(&[-50.0, f64::NAN, f64::NEG_INFINITY], &c), vec![1, 1, 1]);
        assert_eq!(quantize_durations(&[5f64.ln()], &c), vec![4]);
        assert_eq!(quantize_durations(&[f64::INFINITY, 1e3], &c), vec![c.max_duration; 2]);
    }

    #[test]
    fn round_trip_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cfg in [DurationCodecConfig::default(), DurationCodecConfig {
            c0: 0.3,
            c1: -1.2,
            ..Default::default()
        }] {
            for d in 1..=100usize {
                for _ in 0..100 {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    let l = dequantize_durations(&[d], &[u], &cfg).unwrap();
                    assert_eq!(quantize_durations(&l, &cfg), vec![d], "d={d} u={u}");
                }
            }
        }
    }

    #[test]
    fn refit_centres_log_durations() {
        let d = [2usize, 3, 5, 8];
        let c = DurationCodecConfig::default().refit_c1(&d).unwrap();
        let l = dequantize_durations(&d, &[0.5; 4], &c).unwrap();
        assert!(l.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_examples() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0.0).unwrap(), 1.0);
        assert!((s.alpha_bar(1.0).unwrap() - (-10.05f64).exp()).abs() < 1e-18);
        assert!((s.alpha_bar(1.0).unwrap() - 4.32e-5).abs() < 1e-7);
        assert!(matches!(s.alpha_bar(1.5), Err(Error::TimeOutOfRange(_))));
        assert!(matches!(s.alpha_bar(-0.1), Err(Error::TimeOutOfRange(_))));
    }

    /// Adaptive Simpson quadrature, independent of the closed form.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let c = 0.5 * (a + b);
        let whole = (b - a) / 6.0 * (f(a) + 4.0 * f(c) + f(b));
        let left = (c - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + c)) + f(c));
        let right = (b - c) / 6.0 * (f(c) + 4.0 * f(0.5 * (c + b)) + f(b));
        if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            simpson(f, a, c, tol / 2.0, depth - 1) + simpson(f, c, b, tol / 2.0, depth - 1)
        }
    }

    #[test]
    fn alpha_bar_matches_quadrature() {
        let s = NoiseSchedule {
            beta_min: 0.3,
            beta_max: 12.0,
        };
        let beta = |t: f64| s.beta(t);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t: f64 = rng.gen_range(0.0..=1.0);
            let q = (-simpson(&beta, 0.0, t, 1e-13, 40)).exp();
            assert!((q - s.alpha_bar(t).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn perturb_examples() {
        let s = NoiseSchedule::default();
        let x0 = array![[1.0, -2.0], [0.5, 3.0]];
        let eps = array![[0.3, 0.1], [-1.0, 2.0]];
        assert_eq!(perturb(&x0, 0.0, &eps, &s).unwrap(), x0);
        // abar = 0.25 where integral = ln 4
        let t = {
            let (a, b) = (0.5 * (s.beta_max - s.beta_min), s.beta_min);
            (-b + (b * b + 4.0 * a * 4f64.ln()).sqrt()) / (2.0 * a)
        };
        let xt = perturb(&x0, t, &Array2::zeros((2, 2)), &s).unwrap();
        assert!((&xt - &(&x0 * 0.5)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn transition_score_examples() {
        let s = NoiseSchedule::default();
        let t = 0.4;
        let a = s.alpha_bar(t).unwrap();
        let x0 = array![[1.0, 2.0]];
        let at_mode = &x0 * a.sqrt();
        assert!(true_transition_score(&at_mode, &x0, t, &s).unwrap().iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(
            true_transition_score(&x0, &x0, 0.0, &s),
            Err(Error::DegenerateTransition)
        ));
        // abar = 0.75: 1 - abar = 0.25, so x0 = 0, x_t = 1 gives -4
        let t75 = {
            let (qa, b) = (0.5 * (s.beta_max - s.beta_min), s.beta_min);
            (-b + (b * b + 4.0 * qa * (4.0f64 / 3.0).ln()).sqrt()) / (2.0 * qa)
        };
        let sc = true_transition_score(&array![[1.0]], &array![[0.0]], t75, &s).unwrap();
        assert!((sc[[0, 0]] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn transition_score_is_log_density_gradient() {
        let s = NoiseSchedule::default();
        let t = 0.37;
        let a = s.alpha_bar(t).unwrap();
        let x0 = array![[0.4, -1.1, 2.0]];
        let xt = array![[0.9, 0.2, -0.3]];
        let logp = |x: &Array2<f64>| -> f64 {
            x.iter()
                .zip(x0.iter())
                .map(|(x, m)| -0.5 * (x - a.sqrt() * m).powi(2) / (1.0 - a) - 0.5 * (2.0 * std::f64::consts::PI * (1.0 - a)).ln())
                .sum()
        };
        let score = true_transition_score(&xt, &x0, t, &s).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let mut p = xt.clone();
            let mut m = xt.clone();
            p[[0, k]] += h;
            m[[0, k]] -= h;
            let fd = (logp(&p) - logp(&m)) / (2.0 * h);
            assert!((fd - score[[0, k]]).abs() / score[[0, k]].abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn alpha_bar_monotone(t1 in 0.0f64..1.0, dt in 1e-6f64..0.5) {
            let s = NoiseSchedule::default();
            let t2 = (t1 + dt).min(1.0);
            prop_assert!(s.alpha_bar(t2).unwrap() < s.alpha_bar(t1).unwrap());
        }

        #[test]
        fn dequantize_monotone_in_d(d in 1usize..500, u in 0.0f64..1.0) {
            let c = DurationCodecConfig::default();
            let a = dequantize_durations(&[d], &[u], &c).unwrap()[0];
            let b = dequantize_durations(&[d + 1], &[u], &c).unwrap()[0];
            prop_assert!(b > a);
        }
    }
}
