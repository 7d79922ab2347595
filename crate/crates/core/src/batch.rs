//! Padding of variable-length utterances into dense batches.

use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

/// Stacks `(len_i, dim)` matrices into a zero-padded `(B, T_max, dim)` tensor.
pub fn pad_matrices(mats: &[&Array2<f64>], device: &Device) -> Result<(Tensor, Vec<usize>)> {
    let dim = mats.first().map(|m| m.ncols()).unwrap_or(0);
    let lengths: Vec<usize> = mats.iter().map(|m| m.nrows()).collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    let mut data = vec![0.0; mats.len() * t_max * dim];
    for (b, m) in mats.iter().enumerate() {
        for (t, row) in m.rows().into_iter().enumerate() {
            let off = (b * t_max + t) * dim;
            for (k, v) in row.iter().enumerate() {
                data[off + k] = *v;
            }
        }
    }
    Ok((Tensor::from_vec(data, (mats.len(), t_max, dim), device)?, lengths))
}

/// Zero-padded `(B, T_max)` u32 id tensor.
pub fn pad_ids(seqs: &[&[usize]], device: &Device) -> Result<(Tensor, Vec<usize>)> {
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    let mut data = vec![0u32; seqs.len() * t_max];
    for (b, s) in seqs.iter().enumerate() {
        for (t, id) in s.iter().enumerate() {
            data[b * t_max + t] = *id as u32;
        }
    }
    Ok((Tensor::from_vec(data, (seqs.len(), t_max), device)?, lengths))
}

/// Copies the valid `(len, dim)` slice of batch row `b` out of a `(B, T, dim)` tensor.
pub fn unpad_row(t: &Tensor, b: usize, len: usize) -> Result<Array2<f64>> {
    let row = t.get(b)?.narrow(0, 0, len)?;
    crate::tensor::to_array2(&row)
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, (rows, cols), &Device::Cpu)?)
}

/// Mini-batch sampler cycling through shuffled epochs.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    pub(crate) fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
