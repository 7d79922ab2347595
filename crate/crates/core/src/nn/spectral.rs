use std::cell::RefCell;

use candle_core::Tensor;

use super::params::{Init, ParamBuilder};
use crate::error::Result;

/// 2D convolution whose kernel is divided by a power-iteration estimate of
/// its largest singular value (kernel viewed as `out x (in*kh*kw)`).
pub struct SpectralConv2d {
    weight: Tensor,
    bias: Tensor,
    u: RefCell<Vec<f64>>,
    stride: usize,
    padding: usize,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

impl SpectralConv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = pb.get("weight", (out_ch, in_ch, kernel, kernel), Init::Normal(1.0 / fan_in.sqrt()))?;
        let bias = pb.get("bias", out_ch, Init::Zeros)?;
        let mut u = pb.normal_vec(out_ch);
        normalize(&mut u);
        let conv = Self {
            weight,
            bias,
            u: RefCell::new(u),
            stride,
            padding,
        };
        conv.refresh()?;
        Ok(conv)
    }

    /// Resets the left vector to the exact top left singular vector of the
    /// current kernel, e.g. after weights are loaded.
    pub fn warm_up(&self) -> Result<()> {
        self.refresh()
    }

    /// Exact top left singular vector via SVD. Called after each weight
    /// update so the per-forward power step starts from the converged state.
    pub fn refresh(&self) -> Result<()> {
        let (rows, cols, w) = self.matrix()?;
        let m = nalgebra::DMatrix::from_row_slice(rows, cols, &w);
        let svd = m.svd(true, false);
        let (k, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &s)| if s > best.1 { (i, s) } else { best });
        let u_mat = svd.u.expect("requested u");
        let mut u = self.u.borrow_mut();
        // Keep the sign of the previous vector for continuity.
        let dot: f64 = (0..rows).map(|r| u_mat[(r, k)] * u[r]).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..rows {
            u[r] = sign * u_mat[(r, k)];
        }
        Ok(())
    }

    fn matrix(&self) -> Result<(usize, usize, Vec<f64>)> {
        let out = self.weight.dim(0)?;
        let w = self.weight.flatten_all()?.to_vec1::<f64>()?;
        let cols = w.len() / out;
        Ok((out, cols, w))
    }

    /// One power-iteration step: updates the stored left vector and returns
    /// the matching right vector.
    fn power_iterate(&self) -> Result<Vec<f64>> {
        let (rows, cols, w) = self.matrix()?;
        let mut u = self.u.borrow_mut();
        let mut v = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                v[c] += w[r * cols + c] * u[r];
            }
        }
        normalize(&mut v);
        for r in 0..rows {
            u[r] = (0..cols).map(|c| w[r * cols + c] * v[c]).sum();
        }
        normalize(&mut u);
        Ok(v)
    }

    /// Kernel divided by its estimated spectral norm. With `update`, one
    /// power-iteration step refreshes the estimate first. Gradients flow
    /// through the kernel and the norm estimate, not through `u` and `v`.
    pub fn normalized_weight(&self, update: bool) -> Result<Tensor> {
        let v = if update {
            self.power_iterate()?
        } else {
            // Right vector consistent with the current u, without changing it.
            let (rows, cols, w) = self.matrix()?;
            let u = self.u.borrow();
            let mut v = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    v[c] += w[r * cols + c] * u[r];
                }
            }
            normalize(&mut v);
            v
        };
        let out = self.weight.dim(0)?;
        let cols = v.len();
        let u = Tensor::from_vec(self.u.borrow().clone(), (1, out), self.weight.device())?;
        let v = Tensor::from_vec(v, (cols, 1), self.weight.device())?;
        let wm = self.weight.reshape((out, cols))?;
        let sigma = u.matmul(&wm.matmul(&v)?)?.reshape(())?;
        Ok(self.weight.broadcast_div(&sigma)?)
    }

    pub fn forward(&self, x: &Tensor, update: bool) -> Result<Tensor> {
        self.forward_with(x, &self.normalized_weight(update)?, &self.bias)
    }

    /// Forward with weights cut from the autodiff graph.
    pub fn forward_detached(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.normalized_weight(false)?.detach();
        self.forward_with(x, &w, &self.bias.detach())
    }

    fn forward_with(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        // Strided convolution as a dense one plus subsampling: candle's
        // strided backward drops a row or column when the input size is even.
        let mut y = x.conv2d(w, self.padding, 1, 1, 1)?;
        if self.stride > 1 {
            for dim in [2, 3] {
                let n = y.dim(dim)?;
                let idx: Vec<u32> = (0..n as u32).step_by(self.stride).collect();
                let len = idx.len();
                y = y.index_select(&Tensor::from_vec(idx, len, y.device())?, dim)?;
            }
        }
        let c = b.dim(0)?;
        Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
    }

    pub fn raw_weight(&self) -> &Tensor {
        &self.weight
    }
}
