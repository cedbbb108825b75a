//! Parameter storage and transformer building blocks.

mod layers;
mod params;

pub use layers::{causal_mask, sinusoidal_encoding, Block, LayerNorm, Linear, SelfAttention};
pub use params::{Init, LoadReport, ParamBuilder, ParamEntry, ParamGroup, ParamStore, Snapshot};
