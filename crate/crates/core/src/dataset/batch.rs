use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use super::{tokenize, CaptionRecord, TextCodec, TokenSequence};
use crate::audio::{load_waveform, LogMelSpectrogram, MelExtractor, StftConfig};
use crate::{Error, Result};

/// One (audio, caption) training pair after feature extraction.
#[derive(Debug, Clone)]
pub struct Example {
    pub audio_id: String,
    pub spectrogram: Arc<LogMelSpectrogram>,
    pub tokens: TokenSequence,
}

/// Fixed-shape batch: `B` spectrograms of equal shape and a `B x max_len`
/// token matrix padded with the codec's PAD id.
#[derive(Debug, Clone)]
pub struct Batch {
    pub spectrograms: Vec<Arc<LogMelSpectrogram>>,
    pub token_matrix: Vec<u32>,
    pub token_mask: Vec<bool>,
    pub max_len: usize,
    pub record_ids: Vec<String>,
}

impl Batch {
    /// Pads (or, with `truncate`, cuts and re-terminates with EOS) every token
    /// sequence to `max_len`.
    pub fn from_examples(examples: &[Example], max_len: usize, pad_id: u32, eos_id: u32, truncate: bool) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if max_len < 2 {
            return Err(Error::InvalidArgument("max_text_len must be at least 2".into()));
        }
        let shape = examples[0].spectrogram.shape();
        let mut token_matrix = Vec::with_capacity(examples.len() * max_len);
        let mut token_mask = Vec::with_capacity(examples.len() * max_len);
        for ex in examples {
            if ex.spectrogram.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "spectrogram of `{}` is {:?}, batch expects {:?}",
                    ex.audio_id,
                    ex.spectrogram.shape(),
                    shape
                )));
            }
            let mut ids = ex.tokens.ids().to_vec();
            if ids.len() > max_len {
                if !truncate {
                    return Err(Error::LengthMismatch(format!(
                        "caption of `{}` has {} tokens, max_text_len is {max_len}",
                        ex.audio_id,
                        ids.len()
                    )));
                }
                ids.truncate(max_len);
                ids[max_len - 1] = eos_id;
            }
            token_mask.extend((0..max_len).map(|i| i < ids.len()));
            ids.resize(max_len, pad_id);
            token_matrix.extend(ids);
        }
        Ok(Self {
            spectrograms: examples.iter().map(|e| e.spectrogram.clone()).collect(),
            token_matrix,
            token_mask,
            max_len,
            record_ids: examples.iter().map(|e| e.audio_id.clone()).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.record_ids.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.token_matrix[i * self.max_len..(i + 1) * self.max_len]
    }

    pub fn mask_row(&self, i: usize) -> &[bool] {
        &self.token_mask[i * self.max_len..(i + 1) * self.max_len]
    }

    /// `(B, 1, frames, n_mels)` input tensor for the encoder.
    pub fn spectrogram_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (frames, n_mels) = self.spectrograms[0].shape();
        let flat: Vec<f32> = self.spectrograms.iter().flat_map(|s| s.values.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (self.size(), 1, frames, n_mels), device)?.to_dtype(dtype)?)
    }

    /// Decoder input ids `(B, max_len - 1)`: every row without its last slot.
    pub fn input_ids(&self, device: &Device) -> Result<Tensor> {
        self.shifted(0, device)
    }

    /// Target ids `(B, max_len - 1)`: every row without its first slot.
    pub fn target_ids(&self, device: &Device) -> Result<Tensor> {
        self.shifted(1, device)
    }

    /// `(B, max_len - 1)` 0/1 weights marking real (non-pad) targets.
    pub fn target_mask(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let l = self.max_len - 1;
        let w: Vec<f32> = (0..self.size())
            .flat_map(|i| self.mask_row(i)[1..].iter().map(|&m| if m { 1.0 } else { 0.0 }))
            .collect();
        Ok(Tensor::from_vec(w, (self.size(), l), device)?.to_dtype(dtype)?)
    }

    fn shifted(&self, offset: usize, device: &Device) -> Result<Tensor> {
        let l = self.max_len - 1;
        let ids: Vec<u32> = (0..self.size()).flat_map(|i| self.row(i)[offset..offset + l].to_vec()).collect();
        Ok(Tensor::from_vec(ids, (self.size(), l), device)?)
    }
}

/// Loads audio, fixes its duration, extracts features and tokenizes captions.
pub struct Collator {
    extractor: MelExtractor,
    pub audio_seconds: f64,
    pub max_text_len: usize,
    pub truncate: bool,
    pub base_dir: PathBuf,
    codec: Arc<dyn TextCodec>,
}

impl Collator {
    pub fn new(
        stft: StftConfig,
        audio_seconds: f64,
        max_text_len: usize,
        codec: Arc<dyn TextCodec>,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        Ok(Self {
            extractor: MelExtractor::new(stft)?,
            audio_seconds,
            max_text_len,
            truncate: true,
            base_dir: base_dir.into(),
            codec,
        })
    }

    pub fn codec(&self) -> &Arc<dyn TextCodec> {
        &self.codec
    }

    pub fn spectrogram(&self, record: &CaptionRecord) -> Result<LogMelSpectrogram> {
        self.spectrogram_from_path(&record.audio_id, &record.resolved_audio(&self.base_dir))
    }

    pub fn spectrogram_from_path(&self, audio_id: &str, path: &Path) -> Result<LogMelSpectrogram> {
        let rate = self.extractor.config().sample_rate;
        let wave = load_waveform(path, rate).map_err(|e| match e {
            Error::AudioLoad { reason, .. } => Error::AudioLoad {
                audio_id: audio_id.to_string(),
                reason,
            },
            Error::UnsupportedFormat(what) => Error::AudioLoad {
                audio_id: audio_id.to_string(),
                reason: format!("unsupported format: {what}"),
            },
            other => other,
        })?;
        self.extractor.compute(&wave.fix_duration(self.audio_seconds))
    }

    pub fn example(&self, record: &CaptionRecord, caption: &str) -> Result<Example> {
        Ok(Example {
            audio_id: record.audio_id.clone(),
            spectrogram: Arc::new(self.spectrogram(record)?),
            tokens: tokenize(caption, self.codec.as_ref()),
        })
    }

    /// One example per (record, caption) pair. Each audio file is decoded
    /// once and its spectrogram shared by all of its captions.
    pub fn examples(&self, records: &[CaptionRecord]) -> Result<Vec<Example>> {
        let mut cache: HashMap<PathBuf, Arc<LogMelSpectrogram>> = HashMap::new();
        let mut out = Vec::new();
        for record in records {
            let path = record.resolved_audio(&self.base_dir);
            let spec = match cache.get(&path) {
                Some(s) => s.clone(),
                None => {
                    let s = Arc::new(self.spectrogram_from_path(&record.audio_id, &path)?);
                    cache.insert(path, s.clone());
                    s
                }
            };
            for caption in &record.captions {
                out.push(Example {
                    audio_id: record.audio_id.clone(),
                    spectrogram: spec.clone(),
                    tokens: tokenize(caption, self.codec.as_ref()),
                });
            }
        }
        Ok(out)
    }

    pub fn collate(&self, pairs: &[(&CaptionRecord, &str)]) -> Result<Batch> {
        let examples = pairs
            .iter()
            .map(|(r, c)| self.example(r, c))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_examples(
            &examples,
            self.max_text_len,
            self.codec.pad_id(),
            self.codec.eos_id(),
            self.truncate,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav, Waveform};
    use crate::dataset::{Split, Vocabulary};

    fn setup() -> (tempfile::TempDir, Collator, Vec<CaptionRecord>) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = StftConfig::toy();
        for (name, secs) in [("a.wav", 0.5), ("b.wav", 1.5)] {
            let wave = Waveform::new(vec![0.1; (secs * cfg.sample_rate as f64) as usize], cfg.sample_rate).unwrap();
            write_wav(dir.path().join(name), &wave).unwrap();
        }
        let vocab = Vocabulary::from_tokens("a b c d e f g h i j".split(' '));
        let collator = Collator::new(cfg, 1.0, 10, Arc::new(vocab), dir.path()).unwrap();
        let recs = vec![
            CaptionRecord {
                audio_id: "a".into(),
                audio_path: "a.wav".into(),
                captions: vec!["a b c".into()],
                split: Split::Train,
            },
            CaptionRecord {
                audio_id: "b".into(),
                audio_path: "b.wav".into(),
                captions: vec!["a b c d e f".into()],
                split: Split::Train,
            },
        ];
        (dir, collator, recs)
    }

    #[test]
    fn pads_to_fixed_shape_with_exact_mask() {
        let (_d, collator, recs) = setup();
        let batch = collator.collate(&[(&recs[0], "a b c"), (&recs[1], "a b c d e f")]).unwrap();
        assert_eq!(batch.token_matrix.len(), 2 * 10);
        let sums: Vec<usize> = (0..2).map(|i| batch.mask_row(i).iter().filter(|&&m| m).count()).collect();
        assert_eq!(sums, [5, 8]);
        assert!(batch.row(0)[5..].iter().all(|&t| t == crate::dataset::PAD_ID));
        // both clips padded or cut to one second
        assert_eq!(batch.spectrograms[0].shape(), (100, 64));
        assert_eq!(batch.spectrograms[1].shape(), (100, 64));
        let t = batch.spectrogram_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), [2, 1, 100, 64]);
        assert_eq!(batch.input_ids(&Device::Cpu).unwrap().dims(), [2, 9]);
    }

    #[test]
    fn examples_share_spectrograms_per_audio() {
        let (_d, collator, mut recs) = setup();
        recs[1].captions.push("b c".into());
        let ex = collator.examples(&recs).unwrap();
        assert_eq!(ex.len(), 3);
        assert!(Arc::ptr_eq(&ex[1].spectrogram, &ex[2].spectrogram));
        assert!(!Arc::ptr_eq(&ex[0].spectrogram, &ex[1].spectrogram));
    }

    #[test]
    fn single_record_batch() {
        let (_d, collator, recs) = setup();
        let batch = collator.collate(&[(&recs[0], "a b")]).unwrap();
        assert_eq!(batch.size(), 1);
        assert_eq!(batch.row(0).len(), 10);
    }

    #[test]
    fn unreadable_audio_carries_the_audio_id() {
        let (_d, collator, mut recs) = setup();
        recs[1].audio_path = "missing.wav".into();
        recs[1].audio_id = "clip-17".into();
        match collator.collate(&[(&recs[1], "a")]) {
            Err(Error::AudioLoad { audio_id, .. }) => assert_eq!(audio_id, "clip-17"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_keeps_eos() {
        let (_d, mut collator, recs) = setup();
        collator.max_text_len = 4;
        let batch = collator.collate(&[(&recs[1], "a b c d e f")]).unwrap();
        assert_eq!(batch.row(0), [0, 4, 5, 1]);
        collator.truncate = false;
        assert!(matches!(collator.collate(&[(&recs[1], "a b c d e f")]), Err(Error::LengthMismatch(_))));
    }
}
