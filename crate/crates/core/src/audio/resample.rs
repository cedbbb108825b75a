use std::f64::consts::PI;

use super::Waveform;

const HALF_TAPS: i64 = 32;

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// The cutoff sits at the lower of the two Nyquist frequencies so downsampling
/// does not alias. Output length is `round(len * to / from)`.
pub fn resample(wave: &Waveform, target_sample_rate: u32) -> Waveform {
    if wave.sample_rate == target_sample_rate || wave.is_empty() {
        return Waveform {
            samples: wave.samples.clone(),
            sample_rate: target_sample_rate,
        };
    }
    let from = wave.sample_rate as f64;
    let to = target_sample_rate as f64;
    let ratio = to / from;
    let cutoff = ratio.min(1.0);
    let out_len = (wave.len() as f64 * ratio).round() as usize;
    let input = &wave.samples;
    // kernel support measured in input samples
    let support = (HALF_TAPS as f64 / cutoff).ceil() as i64;

    let samples = (0..out_len)
        .map(|n| {
            let center = n as f64 / ratio;
            let first = (center.floor() as i64 - support + 1).max(0);
            let last = (center.floor() as i64 + support).min(input.len() as i64 - 1);
            let mut acc = 0.0f64;
            for k in first..=last {
                let t = center - k as f64;
                let x = t * cutoff;
                let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let w = 0.5 + 0.5 * (PI * t / (support as f64 + 1.0)).cos();
                acc += input[k as usize] as f64 * cutoff * sinc * w;
            }
            acc as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate: target_sample_rate,
    }
}
