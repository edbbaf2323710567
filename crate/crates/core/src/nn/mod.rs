//! Tensor building blocks shared by the encoder, decoder and refiner modules.

pub mod attention;
pub mod layers;
pub mod ops;
pub mod params;

pub use attention::{grid_encoding, sinusoidal_2d, Attention, AttentionTrace};
pub use layers::{ChannelNorm, Conv2d, ConvTranspose2d, Linear, Mlp, TokenNorm};
pub use params::{Init, ParamStore, Scope};
