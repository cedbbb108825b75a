use std::path::Path;

use super::{resample, Waveform};
use crate::{Error, Result};

/// Decodes a WAV file (PCM 8/16/24/32-bit or 32-bit float), averages channels
/// to mono and resamples to `target_sample_rate`.
pub fn load_waveform(path: impl AsRef<Path>, target_sample_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let id = path.display().to_string();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("wav") | Some("wave") => {}
        Some(other) => return Err(Error::UnsupportedFormat(format!("{id} (.{other})"))),
        None => return Err(Error::UnsupportedFormat(id)),
    }

    let load_err = |reason: String| Error::AudioLoad {
        audio_id: id.clone(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| load_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;

    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| load_err(e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| load_err(e.to_string()))?
        }
    };

    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64).sum::<f64>() as f32 / channels as f32)
        .collect();
    let wave = Waveform::new(mono, spec.sample_rate).map_err(|e| load_err(e.to_string()))?;
    Ok(resample(&wave, target_sample_rate))
}

/// Writes a mono waveform as 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    write_wav_channels(path, &[wave.samples.as_slice()], wave.sample_rate)
}

/// Writes one or more equally long channels as 16-bit PCM.
pub fn write_wav_channels(path: impl AsRef<Path>, channels: &[&[f32]], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| Error::AudioLoad {
        audio_id: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    let len = channels.first().map_or(0, |c| c.len());
    for i in 0..len {
        for ch in channels {
            let v = (ch[i].clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
            writer.write_sample(v).map_err(to_err)?;
        }
    }
    writer.finalize().map_err(to_err)
}
