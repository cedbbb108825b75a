//! Desk-scale stand-ins for the real data and the pretrained language model:
//! a small caption grammar, a tiny decoder pretrained on it, and synthetic
//! audio whose content follows its caption.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::checkpoint::{load_checkpoint, sha256_hex};
use crate::dataset::{write_manifest, CaptionRecord, Split, TextCodec, Vocabulary};
use crate::decoder::{caption_loss, DecoderConfig, DecoderMode, FrozenDecoder};
use crate::model::Codec;
use crate::mapper::PrefixSequence;
use crate::nn::{Init, ParamGroup, ParamStore};
use crate::train::{lr_at, AdamW, AdamWConfig, Schedule};
use crate::{Error, Result};

const DETERMINERS: &[&str] = &["a", "the"];
const ADJECTIVES: &[&str] = &[
    "loud", "quiet", "small", "large", "distant", "nearby", "old", "young", "heavy", "light", "fast", "slow",
    "metal", "wooden", "electric", "gentle", "sharp", "deep", "high", "low", "busy", "empty", "steady", "sudden",
];
const NOUNS: &[&str] = &[
    "dog", "cat", "bird", "car", "truck", "train", "bell", "clock", "engine", "door", "crowd", "child", "man",
    "woman", "baby", "horse", "cow", "sheep", "duck", "frog", "insect", "bee", "phone", "alarm", "siren", "drum",
    "guitar", "piano", "violin", "whistle", "hammer", "saw", "drill", "fan", "machine", "motor", "boat", "plane",
    "helicopter", "bus", "bicycle", "kettle", "tap", "wind", "rain", "river", "wave", "fire",
];
const VERBS: &[&str] = &[
    "barks", "meows", "sings", "chirps", "honks", "rings", "ticks", "hums", "roars", "creaks", "cheers", "laughs",
    "talks", "cries", "neighs", "moos", "bleats", "quacks", "croaks", "buzzes", "beeps", "wails", "rattles",
    "whistles", "plays", "clicks", "bangs", "whirs", "rumbles", "splashes", "crackles", "squeaks", "drips",
    "rustles", "echoes", "thumps",
];
const PREPOSITIONS: &[&str] = &["in", "near", "on"];
const PLACES: &[&str] = &[
    "street", "park", "kitchen", "forest", "field", "room", "garden", "station", "yard", "hall", "office", "farm",
    "beach", "road", "bridge", "tunnel", "market", "church", "garage", "school", "lake", "city", "house", "barn",
];
const ADVERBS: &[&str] = &[
    "loudly", "quietly", "repeatedly", "briefly", "softly", "constantly", "twice", "slowly", "quickly", "suddenly",
    "steadily", "continuously",
];
const CONNECTIVES: &[&str] = &["while", "and"];

/// Sound events named by a caption, in order of mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub text: String,
    /// (noun index, verb index) per event.
    pub events: Vec<(usize, usize)>,
}

/// Template grammar over a fixed vocabulary of about 150 words.
#[derive(Debug, Clone, Copy, Default)]
pub struct CaptionGrammar;

impl CaptionGrammar {
    pub fn words() -> Vec<&'static str> {
        let mut set = BTreeSet::new();
        for list in [DETERMINERS, ADJECTIVES, NOUNS, VERBS, PREPOSITIONS, PLACES, ADVERBS, CONNECTIVES] {
            set.extend(list.iter().copied());
        }
        set.into_iter().collect()
    }

    pub fn vocabulary() -> Vocabulary {
        Vocabulary::from_tokens(Self::words())
    }

    pub fn sample(rng: &mut impl Rng) -> Caption {
        let pick = |rng: &mut dyn rand::RngCore, list: &[&'static str]| -> (usize, &'static str) {
            let i = rng.random_range(0..list.len());
            (i, list[i])
        };
        let mut words: Vec<&str> = Vec::new();
        let mut events = Vec::new();
        let (_, det) = pick(rng, DETERMINERS);
        let (n, noun) = pick(rng, NOUNS);
        let (v, verb) = pick(rng, VERBS);
        events.push((n, v));
        match rng.random_range(0..4) {
            0 => {
                let (_, adj) = pick(rng, ADJECTIVES);
                let (_, prep) = pick(rng, PREPOSITIONS);
                let (_, place) = pick(rng, PLACES);
                words.extend([det, adj, noun, verb, prep, "the", place]);
            }
            1 => {
                let (_, adv) = pick(rng, ADVERBS);
                words.extend([det, noun, verb, adv]);
            }
            2 => {
                let (_, conj) = pick(rng, CONNECTIVES);
                let (_, det2) = pick(rng, DETERMINERS);
                let (n2, noun2) = pick(rng, NOUNS);
                let (v2, verb2) = pick(rng, VERBS);
                events.push((n2, v2));
                words.extend([det, noun, verb, conj, det2, noun2, verb2]);
            }
            _ => {
                let (_, adj) = pick(rng, ADJECTIVES);
                let (_, adv) = pick(rng, ADVERBS);
                let (_, prep) = pick(rng, PREPOSITIONS);
                let (_, place) = pick(rng, PLACES);
                words.extend([det, adj, noun, verb, adv, prep, "the", place]);
            }
        }
        Caption {
            text: words.join(" "),
            events,
        }
    }

    /// `n` distinct captions.
    pub fn distinct(n: usize, seed: u64) -> Vec<Caption> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let c = Self::sample(&mut rng);
            if seen.insert(c.text.clone()) {
                out.push(c);
            }
        }
        out
    }

    /// Recovers the events of a grammar caption.
    pub fn parse(text: &str) -> Option<Caption> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let idx = |list: &[&str], w: &str| list.iter().position(|x| *x == w);
        let mut events = Vec::new();
        for (i, w) in words.iter().enumerate() {
            if let (Some(n), Some(v)) = (idx(NOUNS, w), words.get(i + 1).and_then(|nx| idx(VERBS, nx))) {
                events.push((n, v));
            }
        }
        (!events.is_empty()).then(|| Caption {
            text: text.to_string(),
            events,
        })
    }
}

/// Audio for a caption: each event is a tone whose pitch follows the noun
/// and whose amplitude modulation rate follows the verb, plus faint noise.
pub fn synth_audio(caption: &Caption, seconds: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let n = (seconds * sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nyquist = sample_rate as f64 / 2.0;
    let mut samples = vec![0f32; n];
    for (k, &(noun, verb)) in caption.events.iter().enumerate() {
        let f = (150.0 + 55.0 * noun as f64).min(nyquist * 0.9);
        let am = 1.0 + 0.5 * verb as f64;
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let gain = 0.4 / (k + 1) as f64;
        for (i, s) in samples.iter_mut().enumerate() {
            let t = i as f64 / sample_rate as f64;
            let env = 0.5 * (1.0 + (std::f64::consts::TAU * am * t).sin());
            *s += (gain * env * (std::f64::consts::TAU * f * t + phase).sin()) as f32;
        }
    }
    for s in &mut samples {
        *s += rng.random_range(-0.01f32..0.01);
    }
    Waveform::new(samples, sample_rate)
}

/// Writes `counts[split]` synthetic clips (one caption each) as WAV files
/// plus a `manifest.jsonl` into `dir`; returns the records.
pub fn write_synthetic_dataset(
    dir: impl AsRef<Path>,
    counts: &[(Split, usize)],
    seconds: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("audio")).map_err(|e| Error::io(dir, e))?;
    let total: usize = counts.iter().map(|c| c.1).sum();
    let captions = CaptionGrammar::distinct(total, seed);
    let mut records = Vec::with_capacity(total);
    let mut it = captions.into_iter().enumerate();
    for &(split, count) in counts {
        for (i, caption) in it.by_ref().take(count) {
            let id = format!("synth_{i:04}");
            let rel = PathBuf::from("audio").join(format!("{id}.wav"));
            let wave = synth_audio(&caption, seconds, sample_rate, seed.wrapping_add(i as u64))?;
            write_wav(dir.join(&rel), &wave)?;
            records.push(CaptionRecord {
                audio_id: id,
                audio_path: rel,
                captions: vec![caption.text],
                split,
            });
        }
    }
    write_manifest(dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

pub const META_FIXTURE: &str = "fixture_lm";

/// Pretraining recipe for the stand-in decoder.
///
/// A real pretrained language model can be steered by whatever precedes the
/// caption; a tiny model trained on plain text learns instead that nothing
/// before BOS matters, and then no prefix can steer it. So most steps
/// condition the caption on `K` (random in `1..=max_prefix`) vectors made by
/// a throwaway teacher from the caption's own words: word embedding plus a
/// position code, word `i` summed into slot `i mod K`. The remaining steps
/// (every `lm_every`-th) are plain next-token prediction on packed caption
/// streams. Only the decoder is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureLmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub max_prefix: usize,
    pub lm_every: usize,
    pub seed: u64,
}

impl Default for FixtureLmConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 32,
            seq_len: 64,
            peak_lr: 3e-3,
            max_prefix: 12,
            lm_every: 4,
            seed: 7,
        }
    }
}

impl FixtureLmConfig {
    /// Identifies the artifact: recipe, vocabulary and architecture.
    pub fn fingerprint(&self) -> Result<String> {
        let cfg = DecoderConfig::fixture(CaptionGrammar::vocabulary().len());
        let text = serde_json::to_string(&(self, cfg, CaptionGrammar::words()))?;
        Ok(sha256_hex(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Error::Config {
            key: format!("fixture.{key}"),
            reason: reason.into(),
        };
        let max_pos = DecoderConfig::fixture(1).max_positions;
        if self.seq_len == 0 || self.seq_len > max_pos {
            return Err(bad("seq_len", &format!("must be in 1..={max_pos}")));
        }
        if self.max_prefix == 0 || self.max_prefix + MAX_CAPTION_WORDS + 1 > max_pos {
            return Err(bad("max_prefix", "must be at least 1 and leave room for a caption"));
        }
        if self.lm_every == 0 || self.batch_size == 0 {
            return Err(bad("lm_every", "lm_every and batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Longest caption the grammar produces.
const MAX_CAPTION_WORDS: usize = 8;

pub struct PretrainedFixture {
    pub store: ParamStore,
    pub decoder: FrozenDecoder,
    pub vocabulary: Vocabulary,
    pub losses: Vec<f64>,
}

fn packed_stream(vocab: &Vocabulary, rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(len + 16);
    while out.len() < len + 1 {
        out.push(vocab.bos_id());
        out.extend(vocab.encode(&CaptionGrammar::sample(rng).text));
        out.push(vocab.eos_id());
    }
    out.truncate(len + 1);
    out
}

struct Teacher {
    words: Tensor,
    positions: Tensor,
}

impl Teacher {
    /// `(B, K, d)` prefixes for padded word ids `(B, Lw)` of the given lengths.
    fn prefixes(&self, word_ids: &[Vec<u32>], k: usize, d: usize) -> Result<Tensor> {
        let dev = self.words.device();
        let b = word_ids.len();
        let lw = word_ids.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut flat = Vec::with_capacity(b * lw);
        let mut assign = vec![0f32; b * k * lw];
        for (bi, ids) in word_ids.iter().enumerate() {
            for i in 0..lw {
                flat.push(ids.get(i).copied().unwrap_or(0));
                if i < ids.len() {
                    assign[(bi * k + i % k) * lw + i] = 1.0;
                }
            }
        }
        let ids = Tensor::from_vec(flat, b * lw, dev)?;
        let emb = self.words.index_select(&ids, 0)?.reshape((b, lw, d))?;
        let emb = emb.broadcast_add(&self.positions.narrow(0, 0, lw)?.unsqueeze(0)?)?;
        let assign = Tensor::from_vec(assign, (b, k, lw), dev)?;
        Ok(assign.matmul(&emb)?)
    }
}

/// Trains the stand-in decoder from scratch.
pub fn pretrain_fixture_decoder(cfg: &FixtureLmConfig) -> Result<PretrainedFixture> {
    cfg.validate()?;
    let vocabulary = CaptionGrammar::vocabulary();
    let dev = Device::Cpu;
    let store = ParamStore::new(cfg.seed, DType::F32, dev.clone());
    let dcfg = DecoderConfig::fixture(vocabulary.len());
    let d = dcfg.d_model;
    let decoder = FrozenDecoder::new(&store, dcfg, DecoderMode::Pretraining)?;
    let teacher_store = ParamStore::new(cfg.seed.wrapping_add(1), DType::F32, dev.clone());
    let tb = teacher_store.root("teacher", ParamGroup::DecoderEmbedding, true);
    let init = Init::Normal { std: 0.02 };
    let teacher = Teacher {
        words: tb.get((vocabulary.len(), d), "words", init)?,
        positions: tb.get((MAX_CAPTION_WORDS, d), "positions", init)?,
    };
    let mut params = store.trainable();
    params.extend(teacher_store.trainable());
    let mut opt = AdamW::new(
        params,
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let warmup = cfg.steps / 20;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = if step % cfg.lm_every == cfg.lm_every - 1 {
            let mut inputs = Vec::with_capacity(cfg.batch_size * cfg.seq_len);
            let mut targets = Vec::with_capacity(cfg.batch_size * cfg.seq_len);
            for _ in 0..cfg.batch_size {
                let s = packed_stream(&vocabulary, &mut rng, cfg.seq_len);
                inputs.extend_from_slice(&s[..cfg.seq_len]);
                targets.extend_from_slice(&s[1..]);
            }
            let shape = (cfg.batch_size, cfg.seq_len);
            let ids = Tensor::from_vec(inputs, shape, &dev)?;
            let tg = Tensor::from_vec(targets, shape, &dev)?;
            let mask = Tensor::ones(shape, DType::F32, &dev)?;
            caption_loss(&decoder.forward_tokens(&ids)?, &tg, &mask, 0)?
        } else {
            let k = rng.random_range(1..=cfg.max_prefix);
            let words: Vec<Vec<u32>> = (0..cfg.batch_size)
                .map(|_| vocabulary.encode(&CaptionGrammar::sample(&mut rng).text))
                .collect();
            let l = words.iter().map(Vec::len).max().unwrap_or(0) + 1;
            let (mut inputs, mut targets, mut mask) = (Vec::new(), Vec::new(), Vec::new());
            for w in &words {
                let mut seq = vec![vocabulary.bos_id()];
                seq.extend_from_slice(w);
                seq.push(vocabulary.eos_id());
                for j in 0..l {
                    inputs.push(seq.get(j).copied().unwrap_or(vocabulary.pad_id()));
                    targets.push(seq.get(j + 1).copied().unwrap_or(vocabulary.pad_id()));
                    mask.push(if j + 1 < seq.len() { 1f32 } else { 0.0 });
                }
            }
            let shape = (cfg.batch_size, l);
            let prefix = PrefixSequence(teacher.prefixes(&words, k, d)?);
            let logits = decoder.forward(&prefix, &Tensor::from_vec(inputs, shape, &dev)?)?;
            caption_loss(
                &logits,
                &Tensor::from_vec(targets, shape, &dev)?,
                &Tensor::from_vec(mask, shape, &dev)?,
                k,
            )?
        };
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if step % 100 == 0 {
            log::debug!("fixture LM step {step}: loss {value:.4}");
        }
        losses.push(value);
        let grads = loss.backward()?;
        opt.step(&grads, lr_at(step, warmup, cfg.steps, cfg.peak_lr, Schedule::Cosine), Some(1.0))?;
    }
    Ok(PretrainedFixture {
        store,
        decoder,
        vocabulary,
        losses,
    })
}

/// Returns a pretrained fixture decoder at `path`, training and writing it
/// first unless a checkpoint with the same fingerprint is already there.
pub fn ensure_fixture_decoder(path: impl AsRef<Path>, cfg: &FixtureLmConfig) -> Result<PathBuf> {
    let path = path.as_ref();
    let fingerprint = cfg.fingerprint()?;
    if path.exists() {
        if let Ok(ck) = load_checkpoint(path, &Device::Cpu) {
            if ck.metadata.get(META_FIXTURE) == Some(&fingerprint) {
                return Ok(path.to_path_buf());
            }
        }
    }
    log::info!("pretraining fixture decoder ({} steps) into {}", cfg.steps, path.display());
    let fixture = pretrain_fixture_decoder(cfg)?;
    let mut meta = BTreeMap::new();
    Codec::Word(std::sync::Arc::new(fixture.vocabulary.clone())).write_metadata(&mut meta);
    meta.insert(META_FIXTURE.into(), fingerprint);
    fixture.decoder.save(&fixture.store, path, meta)?;
    Ok(path.to_path_buf())
}
