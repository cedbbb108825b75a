//! Waveform decoding, duration fixing and log-mel spectrograms.

mod mel;
mod resample;
mod wav;

pub use mel::{
    mel_filterbank, read_mel_dump, write_mel_dump, LogMelSpectrogram, MelExtractor, StftConfig,
    MEL_DUMP_MAGIC,
};
pub use resample::resample;
pub use wav::{load_waveform, write_wav, write_wav_channels};

/// Mono audio samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> crate::Result<Self> {
        if sample_rate == 0 {
            return Err(crate::Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(crate::Error::InvalidArgument("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Self {
        let n = (seconds * sample_rate as f64).round() as usize;
        Self {
            samples: vec![0.0; n],
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Right-pads with zeros or truncates from the end so the waveform holds
    /// exactly `round(target_seconds * sample_rate)` samples.
    pub fn fix_duration(mut self, target_seconds: f64) -> Self {
        let target = (target_seconds * self.sample_rate as f64).round() as usize;
        self.samples.resize(target, 0.0);
        self
    }
}

pub fn fix_duration(wave: Waveform, target_seconds: f64) -> crate::Result<Waveform> {
    if !(target_seconds > 0.0) {
        return Err(crate::Error::InvalidArgument(format!(
            "target duration must be positive, got {target_seconds}"
        )));
    }
    Ok(wave.fix_duration(target_seconds))
}

/// Computes the log-mel spectrogram of `wave`; its rate must equal `config.sample_rate`.
pub fn log_mel(wave: &Waveform, config: &StftConfig) -> crate::Result<LogMelSpectrogram> {
    LogMelSpectrogram::compute(wave, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_short_audio_with_trailing_zeros() {
        let wave = Waveform::new(vec![0.25; 10 * 32_000], 32_000).unwrap();
        let fixed = fix_duration(wave, 30.0).unwrap();
        assert_eq!(fixed.len(), 960_000);
        assert!(fixed.samples[..320_000].iter().all(|&s| s == 0.25));
        assert!(fixed.samples[320_000..].iter().all(|&s| s == 0.0));
        assert_eq!(fixed.samples.len() - 320_000, 640_000);
    }

    #[test]
    fn exact_length_is_identity() {
        let samples: Vec<f32> = (0..16_000).map(|i| (i as f32 * 0.01).sin()).collect();
        let wave = Waveform::new(samples.clone(), 16_000).unwrap();
        assert_eq!(fix_duration(wave, 1.0).unwrap().samples, samples);
    }

    #[test]
    fn long_audio_keeps_the_head() {
        let samples: Vec<f32> = (0..35 * 32_000).map(|i| i as f32).collect();
        let wave = Waveform::new(samples.clone(), 32_000).unwrap();
        let fixed = fix_duration(wave, 30.0).unwrap();
        assert_eq!(fixed.samples, samples[..960_000]);
    }

    #[test]
    fn rejects_non_positive_target() {
        assert!(fix_duration(Waveform::silence(1.0, 8000), 0.0).is_err());
        assert!(fix_duration(Waveform::silence(1.0, 8000), f64::NAN).is_err());
    }

    #[test]
    fn rejects_bad_waveforms() {
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f32::NAN], 8000).is_err());
    }
}
