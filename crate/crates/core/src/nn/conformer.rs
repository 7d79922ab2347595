//! Conformer encoder stack operating on padded batches.
//!
//! Each block is macaron style:
//!
//! ```text
//! x += 0.5 * FFN(x)
//! x += MHSA(x)
//! x += ConvModule(x)      (pointwise -> GLU -> depthwise -> LN -> swish -> pointwise)
//! x += 0.5 * FFN(x)
//! x  = LN(x)
//! ```
//!
//! Padded frames are zeroed before every depthwise convolution and masked out
//! of attention keys, so outputs at valid frames never depend on padding.

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::layers::{dropout, positional_encoding, swish, Dropout, LayerNorm, Linear};
use super::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub kernel: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    /// Restrict every frame's receptive field to itself and later frames.
    #[serde(default)]
    pub look_ahead_only: bool,
    /// Attention reaches at most this many frames away from the query.
    #[serde(default)]
    pub attention_window: Option<usize>,
}

fn default_ff_mult() -> usize {
    2
}

impl ConformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("degenerate conformer config {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.look_ahead_only && self.kernel % 2 == 0 {
            return Err(Error::Config("symmetric conv kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Validity masks for a padded batch of sequences.
pub struct SeqMask {
    pub lengths: Vec<usize>,
    pub max_len: usize,
    /// (B, T, 1), 1.0 on valid frames.
    pub frames: Tensor,
    /// (B, 1, T, T) additive attention bias.
    pub attn_bias: Tensor,
}

const MASKED: f64 = -1e9;

impl SeqMask {
    pub fn new(lengths: &[usize], max_len: usize, look_ahead_only: bool, device: &Device) -> Result<Self> {
        Self::windowed(lengths, max_len, look_ahead_only, None, device)
    }

    /// Like [`SeqMask::new`], with attention limited to keys at most
    /// `window` frames from the query.
    pub fn windowed(
        lengths: &[usize],
        max_len: usize,
        look_ahead_only: bool,
        window: Option<usize>,
        device: &Device,
    ) -> Result<Self> {
        let b = lengths.len();
        let mut frames = vec![0.0; b * max_len];
        let mut bias = vec![MASKED; b * max_len * max_len];
        for (bi, &len) in lengths.iter().enumerate() {
            for t in 0..len.min(max_len) {
                frames[bi * max_len + t] = 1.0;
            }
            for q in 0..max_len {
                for k in 0..len.min(max_len) {
                    let near = window.map_or(true, |w| k.abs_diff(q) <= w);
                    if near && (!look_ahead_only || k >= q) {
                        bias[(bi * max_len + q) * max_len + k] = 0.0;
                    }
                }
            }
        }
        Ok(Self {
            lengths: lengths.to_vec(),
            max_len,
            frames: Tensor::from_vec(frames, (b, max_len, 1), device)?,
            attn_bias: Tensor::from_vec(bias, (b, 1, max_len, max_len), device)?,
        })
    }
}

struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(pb: &mut ParamBuilder<'_>, d: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut pb.pp("norm"), d)?,
            up: Linear::new(&mut pb.pp("up"), d, d * mult)?,
            down: Linear::new(&mut pb.pp("down"), d * mult, d)?,
        })
    }

    fn forward(&self, x: &Tensor, drop: Option<&Dropout>) -> Result<Tensor> {
        let h = swish(&self.up.forward(&self.norm.forward(x)?)?)?;
        let h = dropout(h, drop)?;
        dropout(self.down.forward(&h)?, drop)
    }
}

struct SelfAttention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(pb: &mut ParamBuilder<'_>, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut pb.pp("norm"), d)?,
            q: Linear::new(&mut pb.pp("q"), d, d)?,
            k: Linear::new(&mut pb.pp("k"), d, d)?,
            v: Linear::new(&mut pb.pp("v"), d, d)?,
            out: Linear::new(&mut pb.pp("out"), d, d)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, mask: &SeqMask, drop: Option<&Dropout>) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let h = self.norm.forward(x)?;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(&h)?)?;
        let k = split(self.k.forward(&h)?)?;
        let v = split(self.v.forward(&h)?)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?.broadcast_add(&mask.attn_bias)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        dropout(self.out.forward(&ctx)?, drop)
    }
}

struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: Tensor,
    depthwise_bias: Tensor,
    mid_norm: LayerNorm,
    pointwise_out: Linear,
    kernel: usize,
    look_ahead_only: bool,
}

impl ConvModule {
    fn new(pb: &mut ParamBuilder<'_>, d: usize, kernel: usize, look_ahead_only: bool) -> Result<Self> {
        let bound = 1.0 / (kernel as f64).sqrt();
        Ok(Self {
            norm: LayerNorm::new(&mut pb.pp("norm"), d)?,
            pointwise_in: Linear::new(&mut pb.pp("pw_in"), d, 2 * d)?,
            depthwise: pb.get("dw_weight", (d, 1, kernel), Init::Uniform(bound))?,
            depthwise_bias: pb.get("dw_bias", d, Init::Zeros)?,
            mid_norm: LayerNorm::new(&mut pb.pp("mid_norm"), d)?,
            pointwise_out: Linear::new(&mut pb.pp("pw_out"), d, d)?,
            kernel,
            look_ahead_only,
        })
    }

    fn forward(&self, x: &Tensor, mask: &SeqMask, drop: Option<&Dropout>) -> Result<Tensor> {
        let d = x.dim(2)?;
        let h = self.pointwise_in.forward(&self.norm.forward(x)?)?;
        let a = h.narrow(2, 0, d)?;
        let gate = h.narrow(2, d, d)?;
        let sig = (gate.neg()?.exp()? + 1.0)?.recip()?;
        let h = a.mul(&sig)?.broadcast_mul(&mask.frames)?;
        // (B, d, T) for the grouped convolution.
        let h = h.transpose(1, 2)?.contiguous()?;
        // Explicit zero padding: the native padded backward underflows when
        // the sequence is shorter than the padding.
        let (left, right) = if self.look_ahead_only {
            (0, self.kernel - 1)
        } else {
            ((self.kernel - 1) / 2, self.kernel - 1 - (self.kernel - 1) / 2)
        };
        let h = h.pad_with_zeros(2, left, right)?.conv1d(&self.depthwise, 0, 1, 1, d)?;
        let h = h
            .broadcast_add(&self.depthwise_bias.reshape((1, d, 1))?)?
            .transpose(1, 2)?;
        let h = swish(&self.mid_norm.forward(&h)?)?;
        dropout(self.pointwise_out.forward(&h)?, drop)
    }
}

struct Block {
    ff1: FeedForward,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    out_norm: LayerNorm,
}

impl Block {
    fn new(pb: &mut ParamBuilder<'_>, cfg: &ConformerConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ff1: FeedForward::new(&mut pb.pp("ff1"), d, cfg.ff_mult)?,
            attn: SelfAttention::new(&mut pb.pp("attn"), d, cfg.heads)?,
            conv: ConvModule::new(&mut pb.pp("conv"), d, cfg.kernel, cfg.look_ahead_only)?,
            ff2: FeedForward::new(&mut pb.pp("ff2"), d, cfg.ff_mult)?,
            out_norm: LayerNorm::new(&mut pb.pp("out_norm"), d)?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &SeqMask, drop: Option<&Dropout>) -> Result<Tensor> {
        let x = (x + (self.ff1.forward(x, drop)? * 0.5)?)?;
        let x = (&x + self.attn.forward(&x, mask, drop)?)?;
        let x = (&x + self.conv.forward(&x, mask, drop)?)?;
        let x = (&x + (self.ff2.forward(&x, drop)? * 0.5)?)?;
        self.out_norm.forward(&x)
    }
}

/// Per-block affine modulation `x * (1 + scale) + shift`, each (B, 1, d).
pub struct Film {
    pub scale: Tensor,
    pub shift: Tensor,
}

pub struct Conformer {
    input: Linear,
    blocks: Vec<Block>,
    cfg: ConformerConfig,
}

impl Conformer {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, cfg: &ConformerConfig) -> Result<Self> {
        cfg.validate()?;
        let input = Linear::new(&mut pb.pp("input"), in_dim, cfg.d_model)?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut pb.pp(&format!("block{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input,
            blocks,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ConformerConfig {
        &self.cfg
    }

    pub fn mask(&self, lengths: &[usize], max_len: usize, device: &Device) -> Result<SeqMask> {
        SeqMask::windowed(lengths, max_len, self.cfg.look_ahead_only, self.cfg.attention_window, device)
    }

    /// `x` is (B, T, in_dim); returns (B, T, d_model), zero on padded frames.
    pub fn forward(
        &self,
        x: &Tensor,
        mask: &SeqMask,
        film: Option<&[Film]>,
        drop: Option<&Dropout>,
    ) -> Result<Tensor> {
        let (_, t, _) = x.dims3()?;
        let pe = positional_encoding(t, self.cfg.d_model, x.device())?;
        let mut h = self.input.forward(x)?.broadcast_add(&pe)?;
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(f) = film.and_then(|f| f.get(i)) {
                h = h
                    .broadcast_mul(&(&f.scale + 1.0)?)?
                    .broadcast_add(&f.shift)?;
            }
            h = block.forward(&h, mask, drop)?;
        }
        Ok(h.broadcast_mul(&mask.frames)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::IndexOp;

    fn cfg(look_ahead_only: bool) -> ConformerConfig {
        ConformerConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            kernel: 3,
            ff_mult: 2,
            look_ahead_only,
            attention_window: None,
        }
    }

    fn random_input(b: usize, t: usize, c: usize, seed: u64) -> Tensor {
        let mut ps = ParamStore::new(seed);
        ps.root().get("x", (b, t, c), Init::Normal(1.0)).unwrap()
    }

    #[test]
    fn padding_does_not_leak_into_valid_frames() {
        let mut ps = ParamStore::new(1);
        let net = Conformer::new(&mut ps.root(), 3, &cfg(false)).unwrap();
        let x = random_input(1, 5, 3, 2);
        let short = x.narrow(1, 0, 3).unwrap();
        let m_full = net.mask(&[3], 5, &Device::Cpu).unwrap();
        let m_short = net.mask(&[3], 3, &Device::Cpu).unwrap();
        let a = net.forward(&x, &m_full, None, None).unwrap();
        let b = net.forward(&short, &m_short, None, None).unwrap();
        let a = a.i((.., 0..3, ..)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn look_ahead_only_ignores_past_frames() {
        let mut ps = ParamStore::new(4);
        let net = Conformer::new(&mut ps.root(), 3, &cfg(true)).unwrap();
        let x = random_input(1, 6, 3, 5);
        let mask = net.mask(&[6], 6, &Device::Cpu).unwrap();
        let base = net.forward(&x, &mask, None, None).unwrap();
        // Perturb frame 1; frames 2.. must be unaffected.
        let mut data = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for v in &mut data[3..6] {
            *v += 1.0;
        }
        let x2 = Tensor::from_vec(data, (1, 6, 3), &Device::Cpu).unwrap();
        let pert = net.forward(&x2, &mask, None, None).unwrap();
        let diff = (base - pert).unwrap().abs().unwrap().sum(2).unwrap().to_vec2::<f64>().unwrap();
        assert!(diff[0][0] > 1e-6 && diff[0][1] > 1e-6);
        assert!(diff[0][2..].iter().all(|d| *d < 1e-12), "{:?}", diff);
    }

    #[test]
    fn diagonal_attention_and_pair_kernel_see_two_frames() {
        let c = ConformerConfig {
            layers: 1,
            kernel: 2,
            attention_window: Some(0),
            ..cfg(true)
        };
        let mut ps = ParamStore::new(8);
        let net = Conformer::new(&mut ps.root(), 3, &c).unwrap();
        let x = random_input(1, 6, 3, 9);
        let mask = net.mask(&[6], 6, &Device::Cpu).unwrap();
        let base = net.forward(&x, &mask, None, None).unwrap();
        // Perturb frame 3: only frames 2 and 3 may change.
        let mut data = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for v in &mut data[9..12] {
            *v += 1.0;
        }
        let x2 = Tensor::from_vec(data, (1, 6, 3), &Device::Cpu).unwrap();
        let pert = net.forward(&x2, &mask, None, None).unwrap();
        let diff = (base - pert).unwrap().abs().unwrap().sum(2).unwrap().to_vec2::<f64>().unwrap();
        for (t, d) in diff[0].iter().enumerate() {
            assert_eq!(*d > 1e-9, t == 2 || t == 3, "{diff:?}");
        }
    }

    #[test]
    fn single_frame_backprops_with_wide_kernel() {
        for look_ahead_only in [false, true] {
            let mut ps = ParamStore::new(6);
            let net = Conformer::new(
                &mut ps.root(),
                3,
                &ConformerConfig {
                    kernel: 7,
                    ..cfg(look_ahead_only)
                },
            )
            .unwrap();
            let x = random_input(1, 1, 3, 7);
            let mask = net.mask(&[1], 1, &Device::Cpu).unwrap();
            let y = net.forward(&x, &mask, None, None).unwrap();
            let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            assert!(ps.all_vars().iter().all(|v| grads.get(v.as_tensor()).is_some()));
        }
    }
}
