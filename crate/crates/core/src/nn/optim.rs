use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

/// Adam over a fixed variable set with global gradient-norm clipping.
pub struct Optimizer {
    inner: AdamW,
    vars: Vec<Var>,
    clip: f64,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, cfg: &OptimizerConfig) -> Result<Self> {
        let params = ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        Ok(Self {
            inner: AdamW::new(vars.clone(), params)?,
            vars,
            clip: cfg.grad_clip,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    /// Backpropagates `loss`, clips, and updates. Returns the pre-clip
    /// gradient norm. A non-finite loss or gradient aborts without updating.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value}")));
        }
        let mut grads = loss.backward()?;
        let norm = self.clip_grads(&mut grads)?;
        self.inner.step(&grads)?;
        Ok(norm)
    }

    fn clip_grads(&self, grads: &mut GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is {norm}")));
        }
        if self.clip > 0.0 && norm > self.clip {
            let scale = self.clip / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::new(&[3.0f64, -2.0], &Device::Cpu).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let mut opt = Optimizer::new(vec![x.clone()], &cfg).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn nan_loss_aborts() {
        let x = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let mut opt = Optimizer::new(vec![x.clone()], &OptimizerConfig::default()).unwrap();
        let loss = (x.as_tensor().sum_all().unwrap() * f64::NAN).unwrap();
        assert!(matches!(opt.backward_step(&loss), Err(Error::Numerical(_))));
    }
}
