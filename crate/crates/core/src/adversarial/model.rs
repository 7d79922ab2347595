use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{leaky_relu, Linear, ParamBuilder, SpectralConv2d};

const SLOPE: f64 = 0.2;
pub const REFINER_CHANNELS: usize = 32;
pub const DISC_CHANNELS: [usize; 4] = [16, 32, 64, 1];

/// Residual branch reading the decoder features `h` as a one-channel image.
/// The final projection starts at zero, so a fresh refiner is the identity.
pub struct Refiner {
    convs: Vec<SpectralConv2d>,
    proj: Linear,
}

impl Refiner {
    pub fn new(pb: &mut ParamBuilder<'_>, d_dec: usize, d_mel: usize) -> Result<Self> {
        let chans = [1, REFINER_CHANNELS, REFINER_CHANNELS, REFINER_CHANNELS, 1];
        let convs = (0..4)
            .map(|i| SpectralConv2d::new(&mut pb.pp(&format!("conv{i}")), chans[i], chans[i + 1], 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let proj = Linear::zeros(&mut pb.pp("proj"), d_dec, d_mel)?;
        Ok(Self { convs, proj })
    }

    pub fn convs(&self) -> &[SpectralConv2d] {
        &self.convs
    }

    /// `(B, T, d_dec)` features to a `(B, T, d_mel)` residual.
    pub fn residual(&self, hidden: &Tensor, update: bool) -> Result<Tensor> {
        let mut x = hidden.unsqueeze(1)?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x, update)?;
            if i < last {
                x = leaky_relu(&x, SLOPE)?;
            }
        }
        self.proj.forward(&x.squeeze(1)?)
    }

    /// `y_hat = y_tilde + residual(h)`, zeroed on padded frames.
    pub fn refine(&self, y_tilde: &Tensor, hidden: &Tensor, frame_mask: &Tensor, update: bool) -> Result<Tensor> {
        let r = self.residual(hidden, update)?.broadcast_mul(frame_mask)?;
        Ok((y_tilde + r)?)
    }
}

/// Four stride-2 spectral-norm convolutions over a `(B, 1, T, D_mel)` image.
/// Every layer output is a feature map; the last one is the score matrix.
pub struct Discriminator {
    convs: Vec<SpectralConv2d>,
}

impl Discriminator {
    pub fn new(pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let mut in_ch = 1;
        let mut convs = Vec::new();
        for (i, &out) in DISC_CHANNELS.iter().enumerate() {
            convs.push(SpectralConv2d::new(&mut pb.pp(&format!("conv{i}")), in_ch, out, 3, 2, 1)?);
            in_ch = out;
        }
        Ok(Self { convs })
    }

    pub fn convs(&self) -> &[SpectralConv2d] {
        &self.convs
    }

    fn run(&self, mel: &Tensor, layer: impl Fn(&SpectralConv2d, &Tensor) -> Result<Tensor>) -> Result<Vec<Tensor>> {
        let mut x = mel.unsqueeze(1)?;
        let last = self.convs.len() - 1;
        let mut feats = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            x = layer(conv, &x)?;
            if i < last {
                x = leaky_relu(&x, SLOPE)?;
            }
            feats.push(x.clone());
        }
        Ok(feats)
    }

    /// Feature maps for a `(B, T, D_mel)` batch.
    pub fn features(&self, mel: &Tensor, update: bool) -> Result<Vec<Tensor>> {
        self.run(mel, |c, x| c.forward(x, update))
    }

    /// Feature maps with the discriminator weights cut from the graph, so
    /// gradients reach only the input.
    pub fn features_detached(&self, mel: &Tensor) -> Result<Vec<Tensor>> {
        self.run(mel, |c, x| c.forward_detached(x))
    }
}
