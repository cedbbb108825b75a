//! The full captioner: encoder → mappers → frozen decoder, plus its codec.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::{LogMelSpectrogram, StftConfig};
use crate::checkpoint::{load_checkpoint, save_tensors, Checkpoint, META_CONFIG, META_KIND, META_VOCAB};
use crate::dataset::{Batch, Gpt2Codec, TextCodec, Vocabulary};
use crate::decoder::{caption_loss, Decoding, DecoderConfig, DecoderMode, FrozenDecoder};
use crate::encoder::{AudioEncoder, EncoderConfig, GlobalFeature, TemporalFeature};
use crate::mapper::{MapperConfig, PrefixMapper, PrefixSequence};
use crate::nn::ParamStore;
use crate::{Error, Result};

pub const META_CODEC: &str = "codec";
pub const META_GPT2_VOCAB: &str = "gpt2_vocab";
pub const META_GPT2_MERGES: &str = "gpt2_merges";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stft: StftConfig,
    pub encoder: EncoderConfig,
    pub mapper: MapperConfig,
    pub decoder: DecoderConfig,
    pub header_tuning: bool,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            stft: StftConfig::toy(),
            encoder: EncoderConfig::toy(),
            mapper: MapperConfig::toy(),
            decoder: DecoderConfig::fixture(vocab_size),
            header_tuning: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.encoder.validate()?;
        self.mapper.validate()?;
        self.decoder.validate()?;
        if self.stft.n_mels != self.encoder.n_mels {
            return Err(Error::ConfigMismatch(format!(
                "spectrogram has {} mel bins, encoder expects {}",
                self.stft.n_mels, self.encoder.n_mels
            )));
        }
        if self.mapper.d_model != self.decoder.d_model {
            return Err(Error::ConfigMismatch(format!(
                "mapper width {} differs from decoder width {}",
                self.mapper.d_model, self.decoder.d_model
            )));
        }
        Ok(())
    }
}

/// A text codec together with what is needed to persist it.
#[derive(Debug, Clone)]
pub enum Codec {
    Word(Arc<Vocabulary>),
    Gpt2 {
        codec: Arc<Gpt2Codec>,
        vocab_json: Arc<str>,
        merges: Arc<str>,
    },
}

impl Codec {
    pub fn gpt2(vocab_json: &str, merges: &str) -> Result<Self> {
        Ok(Codec::Gpt2 {
            codec: Arc::new(Gpt2Codec::from_strs(vocab_json, merges)?),
            vocab_json: vocab_json.into(),
            merges: merges.into(),
        })
    }

    pub fn text_codec(&self) -> Arc<dyn TextCodec> {
        match self {
            Codec::Word(v) => v.clone(),
            Codec::Gpt2 { codec, .. } => codec.clone(),
        }
    }

    pub fn write_metadata(&self, meta: &mut BTreeMap<String, String>) {
        match self {
            Codec::Word(v) => {
                meta.insert(META_CODEC.into(), "word".into());
                meta.insert(META_VOCAB.into(), v.to_text());
            }
            Codec::Gpt2 { vocab_json, merges, .. } => {
                meta.insert(META_CODEC.into(), "gpt2".into());
                meta.insert(META_GPT2_VOCAB.into(), vocab_json.to_string());
                meta.insert(META_GPT2_MERGES.into(), merges.to_string());
            }
        }
    }

    /// Reads a codec stored by [`write_metadata`](Self::write_metadata);
    /// `None` when the metadata carries none.
    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Option<Self>> {
        match meta.get(META_CODEC).map(String::as_str) {
            None => Ok(None),
            Some("word") => {
                let text = meta.get(META_VOCAB).ok_or_else(|| missing_meta(META_VOCAB))?;
                Ok(Some(Codec::Word(Arc::new(Vocabulary::parse(text)?))))
            }
            Some("gpt2") => {
                let v = meta.get(META_GPT2_VOCAB).ok_or_else(|| missing_meta(META_GPT2_VOCAB))?;
                let m = meta.get(META_GPT2_MERGES).ok_or_else(|| missing_meta(META_GPT2_MERGES))?;
                Ok(Some(Codec::gpt2(v, m)?))
            }
            Some(other) => Err(Error::CheckpointMismatch {
                tensor: format!("<metadata:{META_CODEC}>"),
                reason: format!("unknown codec kind `{other}`"),
            }),
        }
    }
}

fn missing_meta(key: &str) -> Error {
    Error::CheckpointMismatch {
        tensor: format!("<metadata:{key}>"),
        reason: "missing metadata entry".into(),
    }
}

#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: AudioEncoder,
    pub mapper: PrefixMapper,
    pub decoder: FrozenDecoder,
    pub codec: Codec,
}

impl CaptionModel {
    /// Freshly initialized modules; the decoder's trainability follows
    /// `config.header_tuning`.
    pub fn build(store: &ParamStore, config: ModelConfig, codec: Codec) -> Result<Self> {
        config.validate()?;
        if codec.text_codec().vocab_size() != config.decoder.vocab_size {
            return Err(Error::ConfigMismatch(format!(
                "codec has {} tokens, decoder vocabulary is {}",
                codec.text_codec().vocab_size(),
                config.decoder.vocab_size
            )));
        }
        let mode = if config.header_tuning {
            DecoderMode::HeaderTuning
        } else {
            DecoderMode::Frozen
        };
        Ok(Self {
            encoder: AudioEncoder::new(store, config.encoder.clone())?,
            mapper: PrefixMapper::new(store, config.mapper.clone(), config.encoder.channel_dim)?,
            decoder: FrozenDecoder::new(store, config.decoder.clone(), mode)?,
            store: store.clone(),
            config,
            codec,
        })
    }

    /// Assembles a model around a pretrained decoder checkpoint. With
    /// `target_vocab` the decoder header is retuned onto it.
    ///
    /// `config.decoder` is replaced by the checkpoint's configuration (and the
    /// target vocabulary size when retuning).
    pub fn with_pretrained_decoder(
        store: &ParamStore,
        mut config: ModelConfig,
        decoder_path: impl AsRef<Path>,
        fallback_codec: Option<Codec>,
        target_vocab: Option<Vocabulary>,
    ) -> Result<Self> {
        let (decoder, meta) = FrozenDecoder::load(store, decoder_path, DecoderMode::Frozen)?;
        let source = match Codec::from_metadata(&meta)? {
            Some(c) => c,
            None => fallback_codec.ok_or_else(|| {
                Error::InvalidArgument("decoder checkpoint carries no codec and no tokenizer files were given".into())
            })?,
        };
        if source.text_codec().vocab_size() != decoder.vocab_size() {
            return Err(Error::ConfigMismatch(format!(
                "codec has {} tokens, decoder vocabulary is {}",
                source.text_codec().vocab_size(),
                decoder.vocab_size()
            )));
        }
        let (decoder, codec) = match target_vocab {
            Some(target) => {
                let tuned = decoder.retune_header(store, &target, source.text_codec().as_ref())?;
                (tuned, Codec::Word(Arc::new(target)))
            }
            None => (decoder, source),
        };
        config.header_tuning = decoder.mode() == DecoderMode::HeaderTuning;
        config.decoder = decoder.config().clone();
        config.validate()?;
        Ok(Self {
            encoder: AudioEncoder::new(store, config.encoder.clone())?,
            mapper: PrefixMapper::new(store, config.mapper.clone(), config.encoder.channel_dim)?,
            decoder,
            store: store.clone(),
            config,
            codec,
        })
    }

    pub fn text_codec(&self) -> Arc<dyn TextCodec> {
        self.codec.text_codec()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }

    pub fn features(&self, spectrograms: &Tensor) -> Result<(TemporalFeature, GlobalFeature)> {
        self.encoder.encode(spectrograms)
    }

    /// Prefixes `(B, K, d)` for a `(B, 1, T, n_mels)` batch.
    pub fn prefixes(&self, spectrograms: &Tensor) -> Result<PrefixSequence> {
        let (f_t, f_g) = self.features(spectrograms)?;
        self.mapper.map(&f_t, &f_g)
    }

    pub fn prefixes_for(&self, specs: &[&LogMelSpectrogram]) -> Result<PrefixSequence> {
        self.prefixes(&stack_spectrograms(specs, self.dtype(), &self.device())?)
    }

    /// Mean token cross-entropy of a batch.
    pub fn loss(&self, batch: &Batch) -> Result<Tensor> {
        let dev = self.device();
        let prefix = self.prefixes(&batch.spectrogram_tensor(self.dtype(), &dev)?)?;
        let logits = self.decoder.forward(&prefix, &batch.input_ids(&dev)?)?;
        caption_loss(
            &logits,
            &batch.target_ids(&dev)?,
            &batch.target_mask(self.dtype(), &dev)?,
            prefix.len(),
        )
    }

    /// One caption per spectrogram.
    pub fn caption(&self, specs: &[&LogMelSpectrogram], decoding: &Decoding) -> Result<Vec<String>> {
        if specs.is_empty() {
            return Ok(Vec::new());
        }
        let codec = self.text_codec();
        let prefix = self.prefixes_for(specs)?;
        (0..specs.len())
            .map(|i| {
                let p = PrefixSequence(prefix.0.narrow(0, i, 1)?);
                let ids = self.decoder.generate(&p, codec.bos_id(), codec.eos_id(), decoding)?;
                Ok(codec.decode(&ids))
            })
            .collect()
    }

    pub fn metadata(&self) -> Result<BTreeMap<String, String>> {
        let mut meta = BTreeMap::new();
        meta.insert(META_CONFIG.into(), serde_json::to_string(&self.config)?);
        meta.insert(META_KIND.into(), "model".into());
        self.codec.write_metadata(&mut meta);
        Ok(meta)
    }

    /// Writes every parameter plus the model config and codec; `extra`
    /// entries are merged into the metadata.
    pub fn save(&self, path: impl AsRef<Path>, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = self.metadata()?;
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        save_tensors(path, &self.store.tensors(), &meta)
    }

    pub fn load(path: impl AsRef<Path>, seed: u64, dtype: DType, device: &Device) -> Result<(Self, Checkpoint)> {
        let ck = load_checkpoint(path, device)?;
        let model = Self::from_checkpoint(&ck, seed, dtype, device)?;
        Ok((model, ck))
    }

    pub fn from_checkpoint(ck: &Checkpoint, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(ck.meta(META_CONFIG)?)
            .map_err(|e| Error::ConfigMismatch(format!("checkpoint config: {e}")))?;
        let codec = Codec::from_metadata(&ck.metadata)?.ok_or_else(|| missing_meta(META_CODEC))?;
        let store = ParamStore::new(seed, dtype, device.clone());
        let model = Self::build(&store, config, codec)?;
        store.assign(&ck.tensors, true)?;
        Ok(model)
    }

    /// A copy of this model with every parameter converted to `dtype`.
    pub fn with_dtype(&self, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(self.store.seed(), dtype, self.device());
        let copy = Self::build(&store, self.config.clone(), self.codec.clone())?;
        let tensors = self.store.tensors().into_iter().collect();
        store.assign(&tensors, true)?;
        Ok(copy)
    }
}

pub fn stack_spectrograms(specs: &[&LogMelSpectrogram], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = specs.first() else {
        return Err(Error::EmptyCorpus);
    };
    let shape = first.shape();
    let mut flat = Vec::with_capacity(specs.len() * first.values.len());
    for s in specs {
        if s.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram {:?} differs from {:?}",
                s.shape(),
                shape
            )));
        }
        flat.extend_from_slice(&s.values);
    }
    Ok(Tensor::from_vec(flat, (specs.len(), 1, shape.0, shape.1), device)?.to_dtype(dtype)?)
}
