//! Inputs shared by the benchmarks.

use std::sync::Arc;

use candle_core::{DType, Device};
use prefixcap::audio::{log_mel, LogMelSpectrogram, StftConfig};
use prefixcap::eval::{EvalCorpus, EvalEntry};
use prefixcap::fixture::{synth_audio, CaptionGrammar};
use prefixcap::model::{CaptionModel, Codec, ModelConfig};
use prefixcap::nn::ParamStore;

/// Toy-scale captioner with a randomly initialized fixture decoder.
pub fn toy_model() -> CaptionModel {
    let vocab = CaptionGrammar::vocabulary();
    let store = ParamStore::new(0, DType::F32, Device::Cpu);
    CaptionModel::build(&store, ModelConfig::toy(vocab.len()), Codec::Word(Arc::new(vocab))).expect("toy model")
}

/// Log-mel spectrogram of `seconds` of synthetic audio.
pub fn spectrogram(stft: &StftConfig, seconds: f64) -> LogMelSpectrogram {
    let caption = &CaptionGrammar::distinct(1, 0)[0];
    let wave = synth_audio(caption, seconds, stft.sample_rate, 0).expect("synthetic audio");
    log_mel(&wave, stft).expect("log-mel")
}

/// `n` grammar captions, each scored against five others.
pub fn corpus(n: usize) -> EvalCorpus {
    let captions = CaptionGrammar::distinct(n * 6, 1);
    let entries = captions
        .chunks(6)
        .enumerate()
        .map(|(i, c)| EvalEntry {
            audio_id: format!("a{i}"),
            candidate: c[0].text.clone(),
            references: c[1..].iter().map(|x| x.text.clone()).collect(),
        })
        .collect();
    EvalCorpus::new(entries).expect("corpus")
}
