use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::{Error, Result};

/// 8-byte magic opening a dumped spectrogram; followed by two little-endian
/// u32 (frames, mel bins) and row-major little-endian f32 values.
pub const MEL_DUMP_MAGIC: &[u8; 8] = b"LOGMEL01";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_offset: f64,
}

impl Default for StftConfig {
    /// 32 kHz, 1024-sample window, hop 640, 64 mel bins over 50 Hz - 14 kHz:
    /// 30 s of audio gives 1500 frames and 10 s gives 500.
    fn default() -> Self {
        Self {
            sample_rate: 32_000,
            window_size: 1024,
            hop_size: 640,
            n_mels: 64,
            fmin: 50.0,
            fmax: 14_000.0,
            log_offset: 1e-10,
        }
    }
}

impl StftConfig {
    /// Small-footprint settings for desk-scale experiments: 8 kHz, hop 80
    /// (100 frames per second), still 64 mel bins.
    pub fn toy() -> Self {
        Self {
            sample_rate: 8_000,
            window_size: 256,
            hop_size: 80,
            n_mels: 64,
            fmin: 50.0,
            fmax: 4_000.0,
            log_offset: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::ConfigMismatch(format!("stft: {reason}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return bad("need 0 < hop_size <= window_size");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.log_offset > 0.0) {
            return bad("log_offset must be positive");
        }
        Ok(())
    }

    /// Number of frames for `n_samples` input samples (no centering).
    pub fn frames_for(&self, n_samples: usize) -> usize {
        n_samples / self.hop_size
    }
}

/// `frames x n_mels` matrix of natural-log mel energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Vec<f32>,
    pub frames: usize,
    pub n_mels: usize,
    pub config: StftConfig,
}

impl LogMelSpectrogram {
    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.n_mels)
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.n_mels..(frame + 1) * self.n_mels]
    }

    /// Pads with silence (`ln(log_offset)`) or truncates to exactly `frames` rows.
    pub fn with_frames(mut self, frames: usize) -> Self {
        let floor = self.config.log_offset.ln() as f32;
        self.values.resize(frames * self.n_mels, floor);
        self.frames = frames;
        self
    }
}

/// Reusable STFT + mel projection for one configuration.
pub struct MelExtractor {
    config: StftConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Vec<Vec<(usize, f64)>>,
}

impl MelExtractor {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let n = config.window_size;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let dense = mel_filterbank(&config);
        let filterbank = dense
            .into_iter()
            .map(|row| row.into_iter().enumerate().filter(|(_, w)| *w > 0.0).collect())
            .collect();
        Ok(Self {
            fft: FftPlanner::new().plan_fft_forward(n),
            window,
            filterbank,
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn compute(&self, wave: &Waveform) -> Result<LogMelSpectrogram> {
        let cfg = &self.config;
        if wave.sample_rate != cfg.sample_rate {
            return Err(Error::ConfigMismatch(format!(
                "waveform is {} Hz but the STFT expects {} Hz",
                wave.sample_rate, cfg.sample_rate
            )));
        }
        let frames = cfg.frames_for(wave.len());
        let n_bins = cfg.window_size / 2 + 1;
        let mut values = Vec::with_capacity(frames * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.window_size];
        let mut power = vec![0.0f64; n_bins];
        for f in 0..frames {
            let start = f * cfg.hop_size;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = wave.samples.get(start + i).copied().unwrap_or(0.0) as f64;
                *slot = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filter in &self.filterbank {
                let energy: f64 = filter.iter().map(|&(k, w)| w * power[k]).sum();
                values.push((energy + cfg.log_offset).ln() as f32);
            }
        }
        Ok(LogMelSpectrogram {
            values,
            frames,
            n_mels: cfg.n_mels,
            config: *cfg,
        })
    }
}

impl LogMelSpectrogram {
    pub fn compute(wave: &Waveform, config: &StftConfig) -> Result<Self> {
        MelExtractor::new(*config)?.compute(wave)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * F_SP
    }
}

/// Slaney-scale, area-normalized triangular filters, `n_mels x (window/2 + 1)`.
pub fn mel_filterbank(config: &StftConfig) -> Vec<Vec<f64>> {
    let n_bins = config.window_size / 2 + 1;
    let lo = hz_to_mel(config.fmin);
    let hi = hz_to_mel(config.fmax);
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * config.sample_rate as f64 / config.window_size as f64;
    (0..config.n_mels)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (right - left);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    let rising = (f - left) / (center - left);
                    let falling = (right - f) / (right - center);
                    rising.min(falling).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

pub fn write_mel_dump(path: impl AsRef<Path>, mel: &LogMelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + mel.values.len() * 4);
    bytes.extend_from_slice(MEL_DUMP_MAGIC);
    bytes.extend_from_slice(&(mel.frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(mel.n_mels as u32).to_le_bytes());
    for v in &mel.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

/// Reads a dump back as `(frames, n_mels, values)`.
pub fn read_mel_dump(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let malformed = || Error::InvalidArgument(format!("{} is not a mel dump", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MEL_DUMP_MAGIC {
        return Err(malformed());
    }
    let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + frames * n_mels * 4 {
        return Err(malformed());
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((frames, n_mels, values))
}
