//! The encoder-decoder transformer and its exact gradients.

mod attention;
mod config;
mod layers;
mod model;
mod params;

pub use attention::{attention, multi_head, AttnMask, AttnOutput};
pub use config::{param_count, ModelConfig};
pub use layers::{gelu, sinusoidal};
pub use model::{Example, Model, Token};
pub use params::{AttnLayout, DecLayerLayout, EncLayerLayout, FfnLayout, Layout, NormLayout, Parameters, Span};
