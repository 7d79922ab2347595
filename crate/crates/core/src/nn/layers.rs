use std::cell::RefCell;

use candle_core::{Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamBuilder};
use crate::error::Result;

/// Dropout source for training-mode forwards. Inference passes `None`.
pub struct Dropout {
    p: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if self.p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let n = x.elem_count();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
        Ok(x.mul(&mask)?)
    }
}

pub(crate) fn dropout(x: Tensor, drop: Option<&Dropout>) -> Result<Tensor> {
    match drop {
        Some(d) => d.apply(&x),
        None => Ok(x),
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.get("weight", (in_dim, out_dim), Init::Uniform(bound))?,
            bias: pb.get("bias", out_dim, Init::Zeros)?,
        })
    }

    /// Linear layer whose weight and bias start at exactly zero.
    pub fn zeros(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", (in_dim, out_dim), Init::Zeros)?,
            bias: pb.get("bias", out_dim, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.get("gamma", dim, Init::Ones)?,
            beta: pb.get("beta", dim, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(pb: &mut ParamBuilder<'_>, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: pb.get("table", (vocab, dim), Init::Normal(1.0))?,
        })
    }

    /// `ids` is (B, M) of u32 indices; returns (B, M, dim).
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, m) = ids.dims2()?;
        let flat = self.table.index_select(&ids.flatten_all()?, 0)?;
        Ok(flat.reshape((b, m, ()))?)
    }
}

pub fn swish(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, slope * x) for slope in (0, 1)
    Ok(x.maximum(&(x * slope)?)?)
}

/// Sinusoidal features of a scalar, `dim` even.
pub fn sinusoidal(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}

/// (T, dim) absolute positional encoding.
pub fn positional_encoding(len: usize, dim: usize, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        data.extend(sinusoidal(pos as f64, dim));
    }
    Ok(Tensor::from_vec(data, (len, dim), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut ps = ParamStore::new(0);
        let ln = LayerNorm::new(&mut ps.root(), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 14.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in y {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_is_seeded() {
        let x = Tensor::ones((4, 8), candle_core::DType::F64, &Device::Cpu).unwrap();
        let a = Dropout::new(0.5, 9).apply(&x).unwrap().to_vec2::<f64>().unwrap();
        let b = Dropout::new(0.5, 9).apply(&x).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &Device::Cpu).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![-0.4, 0.0, 3.0]);
    }
}
