//! Audio captioning by prefix conditioning of a frozen language model.
//!
//! An audio encoder turns a log-mel spectrogram into a temporal feature map and
//! a pooled global vector. Two mapping networks translate those into fixed-count
//! prefix vectors that are prepended to a frozen autoregressive decoder's input
//! embeddings. Only the encoder and mappers (and optionally the decoder's output
//! header) are trained.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod fixture;
pub mod mapper;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod train;
mod error;

pub use error::{Error, Result};
