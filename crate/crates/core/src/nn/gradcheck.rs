use candle_core::{Tensor, Var};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Autodiff versus central-difference gradients on a sample of coordinates.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `|g_ad - g_fd| / max(|g_ad|, |g_fd|)` over the sampled vector.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}

fn set_entry(var: &Var, i: usize, value: f64) -> Result<()> {
    let mut v = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    v[i] = value;
    var.set(&Tensor::from_vec(v, var.shape(), var.device())?)?;
    Ok(())
}

fn check(vars: &[(String, Var)], per_var: usize, h: f64, loss: &dyn Fn() -> Result<Tensor>) -> Result<GradCheck> {
    let l = loss()?;
    let grads = l.backward()?;
    let mut out = GradCheck {
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    for (name, var) in vars {
        let n = var.elem_count();
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let k = per_var.min(n);
        for j in 0..k {
            let i = j * n / k;
            set_entry(var, i, base[i] + h)?;
            let plus = loss()?.to_scalar::<f64>()?;
            set_entry(var, i, base[i] - h)?;
            let minus = loss()?.to_scalar::<f64>()?;
            set_entry(var, i, base[i])?;
            let fd = (plus - minus) / (2.0 * h);
            if !fd.is_finite() {
                return Err(Error::Numerical(format!("non-finite difference at {name}[{i}]")));
            }
            out.analytic.push(g[i]);
            out.numeric.push(fd);
        }
    }
    Ok(out)
}

/// Checks up to `per_var` evenly spaced coordinates of every parameter.
pub fn check_param_gradients(
    params: &ParamStore,
    per_var: usize,
    h: f64,
    loss: &dyn Fn() -> Result<Tensor>,
) -> Result<GradCheck> {
    let vars: Vec<(String, Var)> = params.iter().map(|(n, v)| (n.clone(), v.clone())).collect();
    check(&vars, per_var, h, loss)
}

/// Same check for the input variable of a scalar function.
pub fn check_input_gradient(x: &Var, h: f64, loss: &dyn Fn() -> Result<Tensor>) -> Result<GradCheck> {
    check(&[("x".into(), x.clone())], x.elem_count(), h, loss)
}
