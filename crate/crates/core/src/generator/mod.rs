//! Conditional generator: image encoder, mapping network, style-modulated
//! decoder with encoder skips, and the paired discriminator.

mod bundle;
mod config;
mod layers;
mod nets;

pub use bundle::*;
pub use config::{GeneratorConfig, LayerKind, StyleLayer, COMOD_DIM, LATENT_DIM};
pub use layers::{lrelu, modulated_conv, EqConv, EqLinear, ModConv, LRELU_GAIN, LRELU_SLOPE};
pub use nets::{
    DiscBlock, Discriminator, Encoder, Mapping, Networks, Pyramid, PyramidVars, SynthLayer,
    Synthesis, RESIDUAL_SQUASH,
};
