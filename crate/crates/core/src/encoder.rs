//! Convolutional audio encoder producing a temporal feature map `f_t` and a
//! pooled global vector `f_g`.
//!
//! The layout follows the 14-layer CNN of the pretrained audio neural networks
//! family (`bn0`, `conv_block{k}.conv{1,2}`, `conv_block{k}.bn{1,2}`, `fc1`), so
//! those weights can be loaded by name.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::audio::LogMelSpectrogram;
use crate::checkpoint::load_checkpoint;
use crate::nn::{Init, Linear, LoadReport, ParamBuilder, ParamGroup, ParamStore};
use crate::{Error, Result};

pub const ENCODER_PREFIX: &str = "encoder";
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub n_blocks: usize,
    pub base_channels: usize,
    /// Channel width `C` of the last block, also the width of `f_g`.
    pub channel_dim: usize,
    /// Total time downsampling `D`; a power of two.
    pub time_downsample: usize,
    pub trainable: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl EncoderConfig {
    /// 64 mel bins, channels 64..2048, time downsampled by 64.
    pub fn full() -> Self {
        Self {
            n_mels: 64,
            n_blocks: 6,
            base_channels: 64,
            channel_dim: 2048,
            time_downsample: 64,
            trainable: true,
        }
    }

    pub fn toy() -> Self {
        Self {
            n_mels: 64,
            n_blocks: 5,
            base_channels: 4,
            channel_dim: 32,
            time_downsample: 4,
            trainable: true,
        }
    }

    fn time_pools(&self) -> usize {
        self.time_downsample.trailing_zeros() as usize
    }

    fn freq_pools(&self) -> usize {
        (self.n_mels / 2).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Error::Config {
            key: format!("encoder.{key}"),
            reason,
        };
        if self.n_blocks == 0 || self.base_channels == 0 || self.channel_dim == 0 {
            return Err(bad("n_blocks", "block count and channel widths must be positive".into()));
        }
        if !self.time_downsample.is_power_of_two() {
            return Err(bad("time_downsample", format!("{} is not a power of two", self.time_downsample)));
        }
        if self.time_pools() > self.n_blocks {
            return Err(bad(
                "time_downsample",
                format!("{} needs more than {} blocks", self.time_downsample, self.n_blocks),
            ));
        }
        if self.n_mels < 2 || !(self.n_mels / 2).is_power_of_two() || self.n_mels % 2 != 0 {
            return Err(bad("n_mels", format!("{} is not twice a power of two", self.n_mels)));
        }
        if self.freq_pools() > self.n_blocks {
            return Err(bad(
                "n_mels",
                format!("reducing {} bins to 2 needs more than {} blocks", self.n_mels, self.n_blocks),
            ));
        }
        Ok(())
    }

    /// Output channels of each block: doubling from `base_channels`, with the
    /// last block at `channel_dim`.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.n_blocks)
            .map(|b| {
                if b + 1 == self.n_blocks {
                    self.channel_dim
                } else {
                    self.base_channels << b
                }
            })
            .collect()
    }

    /// (time, frequency) pooling factors of block `b`.
    pub fn pooling(&self, b: usize) -> (usize, usize) {
        let t = if b < self.time_pools() { 2 } else { 1 };
        let f = if b < self.freq_pools() { 2 } else { 1 };
        (t, f)
    }

    /// Time length `N` of `f_t` for `frames` input frames.
    ///
    /// The input is split into windows of `D` frames; a trailing partial window
    /// is zero-padded when at least half full and dropped otherwise. At least
    /// one window is always produced.
    pub fn time_len(&self, frames: usize) -> usize {
        let d = self.time_downsample;
        ((frames + d / 2) / d).max(1)
    }
}

/// `f_t`: a `(B, N, 2, C)` feature map.
#[derive(Debug, Clone)]
pub struct TemporalFeature(pub Tensor);

impl TemporalFeature {
    pub fn time_len(&self) -> usize {
        self.0.dims()[1]
    }
}

/// `f_g`: a `(B, C)` clip-level vector.
#[derive(Debug, Clone)]
pub struct GlobalFeature(pub Tensor);

/// Inference-form batch normalization with stored statistics.
#[derive(Debug, Clone)]
struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl BatchNorm {
    fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(dim, "weight", Init::Ones)?,
            bias: pb.get(dim, "bias", Init::Zeros)?,
            running_mean: pb.buffer(dim, "running_mean", Init::Zeros)?,
            running_var: pb.buffer(dim, "running_var", Init::Ones)?,
        })
    }

    /// Normalizes along the dimension `axis` of a rank-4 tensor.
    fn forward(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let mut shape = [1usize; 4];
        shape[axis] = self.weight.dims()[0];
        let scale = self.weight.broadcast_div(&(&self.running_var + BN_EPS)?.sqrt()?)?;
        let shift = (&self.bias - (&self.running_mean * &scale)?)?;
        Ok(x.broadcast_mul(&scale.reshape(shape.to_vec())?)?
            .broadcast_add(&shift.reshape(shape.to_vec())?)?)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Tensor,
    bn1: BatchNorm,
    conv2: Tensor,
    bn2: BatchNorm,
    pool: (usize, usize),
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.bn1.forward(&x.conv2d(&self.conv1, 1, 1, 1, 1)?, 1)?.relu()?;
        let x = self.bn2.forward(&x.conv2d(&self.conv2, 1, 1, 1, 1)?, 1)?.relu()?;
        avg_pool(&x, self.pool)
    }
}

/// Non-overlapping average pooling of `(B, C, H, W)` that drops incomplete
/// trailing windows. Written as reshape + mean because the library pooling
/// op routes gradient into dropped rows.
fn avg_pool(x: &Tensor, (ph, pw): (usize, usize)) -> Result<Tensor> {
    if (ph, pw) == (1, 1) {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / ph, w / pw);
    let x = x.narrow(2, 0, oh * ph)?.narrow(3, 0, ow * pw)?.contiguous()?;
    Ok(x.reshape((b * c * oh, ph, ow, pw))?.mean(3)?.mean(1)?.reshape((b, c, oh, ow))?)
}

#[derive(Debug, Clone)]
pub struct AudioEncoder {
    config: EncoderConfig,
    bn0: BatchNorm,
    blocks: Vec<ConvBlock>,
    fc1: Linear,
}

impl AudioEncoder {
    pub fn new(store: &ParamStore, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let pb = store.root(ENCODER_PREFIX, ParamGroup::Encoder, config.trainable);
        let bn0 = BatchNorm::new(&pb.pp("bn0"), config.n_mels)?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        let mut c_in = 1;
        for (b, c_out) in config.channels().into_iter().enumerate() {
            let bp = pb.pp(format!("conv_block{}", b + 1));
            blocks.push(ConvBlock {
                conv1: bp.pp("conv1").get((c_out, c_in, 3, 3), "weight", Init::Kaiming)?,
                bn1: BatchNorm::new(&bp.pp("bn1"), c_out)?,
                conv2: bp.pp("conv2").get((c_out, c_out, 3, 3), "weight", Init::Kaiming)?,
                bn2: BatchNorm::new(&bp.pp("bn2"), c_out)?,
                pool: config.pooling(b),
            });
            c_in = c_out;
        }
        let fc1 = Linear::with_init(&pb.pp("fc1"), config.channel_dim, config.channel_dim, Init::FanIn)?;
        Ok(Self {
            config,
            bn0,
            blocks,
            fc1,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes a `(B, 1, T, n_mels)` batch.
    pub fn encode(&self, x: &Tensor) -> Result<(TemporalFeature, GlobalFeature)> {
        let map = self.feature_map(x)?;
        let f_g = self.global_from_map(&map)?;
        Ok((TemporalFeature(map.permute((0, 2, 3, 1))?.contiguous()?), f_g))
    }

    pub fn encode_spectrogram(&self, spec: &LogMelSpectrogram) -> Result<(TemporalFeature, GlobalFeature)> {
        let (t, m) = spec.shape();
        let store_dtype = self.fc1.weight.dtype();
        let x = Tensor::from_vec(spec.values.clone(), (1, 1, t, m), self.fc1.weight.device())?.to_dtype(store_dtype)?;
        self.encode(&x)
    }

    /// Pre-projection `(B, C, N, 2)` map.
    pub fn feature_map(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[3] != self.config.n_mels {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects (B, 1, T, {}), got {dims:?}",
                self.config.n_mels
            )));
        }
        let frames = dims[2];
        // bn0 normalizes each mel bin: move bins to axis 1 and back
        let x = self.bn0.forward(&x.transpose(1, 3)?, 1)?.transpose(1, 3)?;
        let target = self.config.time_len(frames) * self.config.time_downsample;
        let mut x = if target > frames {
            x.pad_with_zeros(2, 0, target - frames)?
        } else {
            x.narrow(2, 0, target)?
        };
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    /// `f_g` from a pre-projection map: projection of its time-frequency mean.
    pub fn global_from_map(&self, map: &Tensor) -> Result<GlobalFeature> {
        let pooled = map.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(GlobalFeature(self.fc1.forward(&pooled)?.relu()?))
    }

    /// Loads encoder weights from a named-tensor checkpoint. Tensor names may
    /// be bare (`conv_block1.conv1.weight`) or carry the `encoder/` prefix;
    /// anything else in the file is reported as skipped.
    pub fn load_pretrained(store: &ParamStore, path: impl AsRef<Path>, strict: bool) -> Result<LoadReport> {
        let ck = load_checkpoint(path, &store.device())?;
        let prefix = format!("{ENCODER_PREFIX}/");
        let tensors: HashMap<String, Tensor> = ck
            .tensors
            .into_iter()
            .map(|(k, v)| {
                let k = k.strip_prefix(&prefix).unwrap_or(&k).to_string();
                (format!("{prefix}{k}"), v)
            })
            .collect();
        store.assign_under(&prefix, &tensors, strict)
    }

    /// Sets `bn0` statistics, e.g. from training-set spectrograms when no
    /// pretrained weights are used.
    pub fn set_input_statistics(store: &ParamStore, mean: &[f32], var: &[f32]) -> Result<()> {
        let dev = store.device();
        let tensors = HashMap::from([
            (format!("{ENCODER_PREFIX}/bn0.running_mean"), Tensor::new(mean, &dev)?),
            (format!("{ENCODER_PREFIX}/bn0.running_var"), Tensor::new(var, &dev)?),
        ]);
        store.assign_under(&format!("{ENCODER_PREFIX}/bn0.running_"), &tensors, true)?;
        Ok(())
    }
}

/// Per-mel-bin mean and variance over a set of spectrograms.
pub fn mel_statistics<'a>(specs: impl IntoIterator<Item = &'a LogMelSpectrogram>) -> Option<(Vec<f32>, Vec<f32>)> {
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for s in specs {
        if sum.is_empty() {
            sum = vec![0.0; s.n_mels];
            sq = vec![0.0; s.n_mels];
        }
        for row in s.values.chunks(s.n_mels) {
            for (i, &v) in row.iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += (v as f64) * (v as f64);
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let n = count as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let var: Vec<f32> = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| ((q / n - (s / n).powi(2)).max(1e-6)) as f32)
        .collect();
    Some((mean, var))
}
