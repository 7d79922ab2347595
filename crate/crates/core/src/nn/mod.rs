//! Small neural-network toolkit on top of candle: seeded parameters,
//! conformer stacks, spectral-norm convolutions and the optimizer.

mod conformer;
mod gradcheck;
mod layers;
mod optim;
mod params;
mod spectral;

pub use conformer::{Conformer, ConformerConfig, Film, SeqMask};
pub use gradcheck::{check_input_gradient, check_param_gradients, GradCheck};
pub use layers::{leaky_relu, positional_encoding, sinusoidal, swish, Dropout, Embedding, LayerNorm, Linear};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{Init, ParamBuilder, ParamStore};
pub use spectral::SpectralConv2d;
