//! GPT-2 style autoregressive decoder conditioned on prefix embeddings.
//!
//! The decoder's weights stay fixed during caption training: modules hold
//! them as detached tensors, so no gradient is ever accumulated for them even
//! though gradients flow through them to the prefixes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_tensors, META_KIND};
use crate::dataset::{TextCodec, UNK_TOKEN};
use crate::mapper::PrefixSequence;
use crate::nn::{causal_mask, Block, Init, LayerNorm, LoadReport, ParamGroup, ParamStore, Snapshot};
use crate::{Error, Result};

pub const DECODER_PREFIX: &str = "decoder";
pub const META_DECODER_CONFIG: &str = "decoder_config";
const MIN_TARGET_VOCAB: usize = 10;
const NAME_MAP: &str = include_str!("../data/gpt2_name_map.tsv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    pub ln_eps: f64,
}

impl DecoderConfig {
    pub fn gpt2_small() -> Self {
        Self {
            vocab_size: 50257,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            max_positions: 1024,
            ln_eps: 1e-5,
        }
    }

    /// Two-layer, 64-wide stand-in used by tests and toy runs.
    pub fn fixture(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_positions: 128,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config {
                key: "decoder.n_heads".into(),
                reason: format!("{} heads do not divide d_model {}", self.n_heads, self.d_model),
            });
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::Config {
                key: "decoder.vocab_size".into(),
                reason: "vocabulary and position table must be non-empty".into(),
            });
        }
        Ok(())
    }
}

/// Which decoder parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Everything frozen (caption training default).
    Frozen,
    /// Only the output header is trainable.
    HeaderTuning,
    /// Everything trainable; used to pretrain a language model from scratch.
    Pretraining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "width")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Decoding {
    pub strategy: Strategy,
    /// Maximum number of generated tokens (EOS included).
    pub max_len: usize,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_len: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrozenDecoder {
    config: DecoderConfig,
    mode: DecoderMode,
    wte: Tensor,
    wpe: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    header: Tensor,
}

impl FrozenDecoder {
    pub fn new(store: &ParamStore, config: DecoderConfig, mode: DecoderMode) -> Result<Self> {
        config.validate()?;
        let all = mode == DecoderMode::Pretraining;
        let root = store.root(DECODER_PREFIX, ParamGroup::DecoderEmbedding, all);
        let emb = Init::Normal { std: 0.02 };
        let wte = root.pp("wte").get((config.vocab_size, config.d_model), "weight", emb)?;
        let wpe = root.pp("wpe").get((config.max_positions, config.d_model), "weight", Init::Normal { std: 0.01 })?;
        let body = root.with_group(ParamGroup::DecoderTransformer, all);
        let blocks = (0..config.n_layers)
            .map(|i| Block::new(&body.pp("h").pp(i), config.d_model, config.n_heads, config.ln_eps))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&body.pp("ln_f"), config.d_model, config.ln_eps)?;
        let head = root.with_group(ParamGroup::DecoderHeader, mode != DecoderMode::Frozen);
        let header = head.pp("header").get((config.vocab_size, config.d_model), "weight", emb)?;
        Ok(Self {
            config,
            mode,
            wte,
            wpe,
            blocks,
            ln_f,
            header,
        })
    }

    /// Builds the decoder from a checkpoint written by [`save`](Self::save) or
    /// [`import_gpt2`]; returns the checkpoint metadata too.
    pub fn load(store: &ParamStore, path: impl AsRef<Path>, mode: DecoderMode) -> Result<(Self, BTreeMap<String, String>)> {
        let ck = load_checkpoint(path, &store.device())?;
        let config: DecoderConfig = serde_json::from_str(ck.meta(META_DECODER_CONFIG)?)?;
        let decoder = Self::new(store, config, mode)?;
        store.assign_under(&format!("{DECODER_PREFIX}/"), &ck.tensors, true)?;
        Ok((decoder, ck.metadata))
    }

    /// Writes only the decoder parameters, with its config in the metadata.
    pub fn save(&self, store: &ParamStore, path: impl AsRef<Path>, mut metadata: BTreeMap<String, String>) -> Result<()> {
        let prefix = format!("{DECODER_PREFIX}/");
        let tensors = store.tensors().into_iter().filter(|(k, _)| k.starts_with(&prefix)).collect();
        metadata.insert(META_DECODER_CONFIG.into(), serde_json::to_string(&self.config)?);
        metadata.insert(META_KIND.into(), "decoder".into());
        save_tensors(path, &tensors, &metadata)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn mode(&self) -> DecoderMode {
        self.mode
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Token embeddings `(B, L, d)` for `(B, L)` ids.
    pub fn embed(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        Ok(self.wte.index_select(&flat, 0)?.reshape((b, l, self.config.d_model))?)
    }

    /// Logits `(B, K + L, V)` for prefixes `(B, K, d)` followed by token ids
    /// `(B, L)`, under a causal mask.
    pub fn forward(&self, prefix: &PrefixSequence, ids: &Tensor) -> Result<Tensor> {
        if prefix.width() != self.config.d_model {
            return Err(Error::DimensionMismatch(format!(
                "prefix width {} does not match decoder width {}",
                prefix.width(),
                self.config.d_model
            )));
        }
        let tokens = self.embed(ids)?;
        if prefix.0.dims()[0] != tokens.dims()[0] {
            return Err(Error::DimensionMismatch(format!(
                "prefix batch {} does not match token batch {}",
                prefix.0.dims()[0],
                tokens.dims()[0]
            )));
        }
        self.forward_embeds(&Tensor::cat(&[&prefix.0.to_dtype(tokens.dtype())?, &tokens], 1)?)
    }

    /// Logits for a plain token sequence (no prefix).
    pub fn forward_tokens(&self, ids: &Tensor) -> Result<Tensor> {
        self.forward_embeds(&self.embed(ids)?)
    }

    pub fn forward_embeds(&self, x: &Tensor) -> Result<Tensor> {
        let (_, s, _) = x.dims3()?;
        if s > self.config.max_positions {
            return Err(Error::LengthMismatch(format!(
                "sequence of {s} positions exceeds the decoder's {}",
                self.config.max_positions
            )));
        }
        let mask = causal_mask(s, x.dtype(), x.device())?;
        let mut h = x.broadcast_add(&self.wpe.narrow(0, 0, s)?)?;
        for block in &self.blocks {
            h = block.forward(&h, Some(&mask))?;
        }
        let h = self.ln_f.forward(&h)?;
        Ok(h.broadcast_matmul(&self.header.t()?)?)
    }

    /// Generates token ids (without BOS/EOS) after the prefix `(1, K, d)`.
    pub fn generate(&self, prefix: &PrefixSequence, bos: u32, eos: u32, decoding: &Decoding) -> Result<Vec<u32>> {
        if prefix.0.dims()[0] != 1 {
            return Err(Error::InvalidArgument("generation takes a single prefix".into()));
        }
        match decoding.strategy {
            Strategy::Greedy => self.greedy(prefix, bos, eos, decoding.max_len),
            Strategy::Beam(width) => self.beam(prefix, bos, eos, decoding.max_len, width.max(1)),
        }
    }

    /// Last-position log-probabilities for each row of `seqs` (all the same
    /// length, BOS first), computed in f64.
    fn next_log_probs(&self, prefix: &PrefixSequence, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let n = seqs.len();
        let l = seqs[0].len();
        let flat: Vec<u32> = seqs.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(flat, (n, l), prefix.0.device())?;
        let dims = prefix.0.dims();
        let prefix = PrefixSequence(prefix.0.broadcast_as((n, dims[1], dims[2]))?.contiguous()?);
        let logits = self.forward(&prefix, &ids)?;
        let s = logits.dims()[1];
        let last = logits.narrow(1, s - 1, 1)?.squeeze(1)?.to_dtype(DType::F64)?;
        Ok(last.to_vec2::<f64>()?.into_iter().map(log_softmax).collect())
    }

    fn greedy(&self, prefix: &PrefixSequence, bos: u32, eos: u32, max_len: usize) -> Result<Vec<u32>> {
        let mut seq = vec![bos];
        for _ in 0..max_len {
            let lp = self.next_log_probs(prefix, std::slice::from_ref(&seq))?;
            let next = argmax(&lp[0]);
            if next == eos {
                break;
            }
            seq.push(next);
        }
        Ok(seq[1..].to_vec())
    }

    fn beam(&self, prefix: &PrefixSequence, bos: u32, eos: u32, max_len: usize, width: usize) -> Result<Vec<u32>> {
        // (tokens after BOS, summed log-probability)
        let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![], 0.0)];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        for _ in 0..max_len {
            let seqs: Vec<Vec<u32>> = alive
                .iter()
                .map(|(t, _)| std::iter::once(bos).chain(t.iter().copied()).collect())
                .collect();
            let lps = self.next_log_probs(prefix, &seqs)?;
            let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(alive.len() * lps[0].len());
            for (i, lp) in lps.iter().enumerate() {
                for (v, &p) in lp.iter().enumerate() {
                    cands.push((alive[i].1 + p, i, v as u32));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for (score, i, v) in cands.into_iter().take(2 * width) {
                if v == eos {
                    finished.push((alive[i].0.clone(), score));
                } else {
                    let mut t = alive[i].0.clone();
                    t.push(v);
                    next.push((t, score));
                }
                if next.len() == width {
                    break;
                }
            }
            alive = next;
            if finished.len() >= width || alive.is_empty() {
                break;
            }
        }
        // finished lengths count their EOS
        let normalized = |(t, s): &(Vec<u32>, f64), done: bool| s / (t.len() + done as usize).max(1) as f64;
        let mut best: Option<(f64, &Vec<u32>)> = None;
        let pool = finished
            .iter()
            .map(|h| (normalized(h, true), &h.0))
            .chain(if finished.len() < width {
                alive.iter().map(|h| (normalized(h, false), &h.0)).collect::<Vec<_>>()
            } else {
                Vec::new()
            });
        for (score, tokens) in pool {
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, tokens));
            }
        }
        Ok(best.map(|(_, t)| t.clone()).unwrap_or_default())
    }

    /// Replaces the output header with a trainable map onto `target`'s
    /// vocabulary. Input embeddings are re-keyed: each target token's row is
    /// the mean of the source rows of its subword pieces under `source`. The
    /// new header starts as a copy of the re-keyed input table.
    pub fn retune_header(&self, store: &ParamStore, target: &dyn TextCodec, source: &dyn TextCodec) -> Result<Self> {
        let size = target.vocab_size();
        if size < MIN_TARGET_VOCAB {
            return Err(Error::VocabTooSmall(size));
        }
        let d = self.config.d_model;
        let src: Vec<Vec<f32>> = self.wte.to_dtype(DType::F32)?.to_vec2()?;
        let mean_rows = |ids: &[u32]| -> Vec<f32> {
            let rows: Vec<&Vec<f32>> = ids.iter().filter_map(|&i| src.get(i as usize)).collect();
            let rows: Vec<&Vec<f32>> = if rows.is_empty() { src.iter().collect() } else { rows };
            let mut acc = vec![0f32; d];
            for r in &rows {
                for (a, v) in acc.iter_mut().zip(r.iter()) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / rows.len() as f32).collect()
        };
        let mut table = Vec::with_capacity(size * d);
        for id in 0..size as u32 {
            let row = if id == target.bos_id() {
                mean_rows(&[source.bos_id()])
            } else if id == target.eos_id() {
                mean_rows(&[source.eos_id()])
            } else if id == target.pad_id() {
                mean_rows(&[source.pad_id()])
            } else {
                match target.piece(id) {
                    Some(p) if p != UNK_TOKEN => mean_rows(&source.encode_word(&p)),
                    _ => mean_rows(&[]),
                }
            };
            table.extend(row);
        }
        let table = Tensor::from_vec(table, (size, d), &store.device())?;
        let root = store.root(DECODER_PREFIX, ParamGroup::DecoderEmbedding, false);
        let wte = root.pp("wte").insert("weight", &table)?;
        let header = root
            .with_group(ParamGroup::DecoderHeader, true)
            .pp("header")
            .insert("weight", &table)?;
        Ok(Self {
            config: DecoderConfig {
                vocab_size: size,
                ..self.config.clone()
            },
            mode: DecoderMode::HeaderTuning,
            wte,
            header,
            ..self.clone()
        })
    }
}

fn log_softmax(row: Vec<f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.into_iter().map(|v| v - lse).collect()
}

/// Index of the first maximum.
fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Mean negative log-likelihood of `targets (B, L)` under `logits (B, S, V)`,
/// reading the rows after the `k` prefix positions and weighting by
/// `mask (B, L)`.
pub fn caption_loss(logits: &Tensor, targets: &Tensor, mask: &Tensor, k: usize) -> Result<Tensor> {
    let (b, s, _) = logits.dims3()?;
    let (tb, l) = targets.dims2()?;
    if tb != b || s < k + l {
        return Err(Error::LengthMismatch(format!(
            "logits {:?} cannot score {l} targets after {k} prefixes",
            logits.dims()
        )));
    }
    let lp = candle_nn::ops::log_softmax(&logits.narrow(1, k, l)?, D::Minus1)?;
    let picked = lp.gather(&targets.unsqueeze(2)?.contiguous()?, 2)?.squeeze(2)?;
    let mask = mask.to_dtype(picked.dtype())?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count <= 0.0 {
        return Err(Error::LengthMismatch("no target positions to score".into()));
    }
    Ok(((picked * mask)?.sum_all()?.neg()? / count)?)
}

/// Outcome of a frozen-parameter check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrozenReport {
    /// Max absolute change per group since the snapshot.
    pub max_abs_diff: BTreeMap<ParamGroup, f64>,
    /// Groups with no trainable member.
    pub frozen: Vec<ParamGroup>,
}

/// Compares the store against `snapshot`; every group without trainable
/// parameters must be unchanged bit for bit.
pub fn verify_frozen(store: &ParamStore, snapshot: &Snapshot) -> Result<FrozenReport> {
    let diffs = store.max_abs_diff(snapshot)?;
    let mut trainable: BTreeMap<ParamGroup, bool> = BTreeMap::new();
    for (_, e) in store.entries() {
        *trainable.entry(e.group).or_default() |= e.trainable;
    }
    let frozen: Vec<ParamGroup> = trainable.iter().filter(|(_, t)| !**t).map(|(g, _)| *g).collect();
    for g in &frozen {
        let d = diffs.get(g).copied().unwrap_or(0.0);
        if d != 0.0 {
            return Err(Error::FrozenViolation {
                group: g.to_string(),
                max_abs_diff: d,
            });
        }
    }
    Ok(FrozenReport {
        max_abs_diff: diffs,
        frozen,
    })
}

struct MapRule {
    source: String,
    target: String,
    transpose: bool,
}

fn name_map() -> Vec<MapRule> {
    NAME_MAP
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            MapRule {
                source: cols[0].to_string(),
                target: cols[1].to_string(),
                transpose: cols.get(2) == Some(&"transpose"),
            }
        })
        .collect()
}

/// Converts a pretrained GPT-2 weight file (safetensors, Hugging Face layout)
/// into a decoder checkpoint. `n_heads` defaults to `d_model / 64`.
pub fn import_gpt2(src: impl AsRef<Path>, dst: impl AsRef<Path>, n_heads: Option<usize>) -> Result<DecoderConfig> {
    let ck = load_checkpoint(src, &candle_core::Device::Cpu)?;
    let tensors: HashMap<String, Tensor> = ck
        .tensors
        .into_iter()
        .map(|(k, v)| (k.strip_prefix("transformer.").unwrap_or(&k).to_string(), v))
        .collect();
    let wte = tensors.get("wte.weight").ok_or_else(|| Error::CheckpointMismatch {
        tensor: "wte.weight".into(),
        reason: "missing from checkpoint".into(),
    })?;
    let (vocab_size, d_model) = wte.dims2()?;
    let max_positions = tensors.get("wpe.weight").map(|t| t.dims()[0]).unwrap_or(1024);
    let n_layers = (0..).take_while(|i| tensors.contains_key(&format!("h.{i}.ln_1.weight"))).count();
    let config = DecoderConfig {
        vocab_size,
        d_model,
        n_layers,
        n_heads: n_heads.unwrap_or((d_model / 64).max(1)),
        max_positions,
        ln_eps: 1e-5,
    };
    config.validate()?;
    let mut out = BTreeMap::new();
    for rule in name_map() {
        let layers: Vec<Option<usize>> = if rule.source.contains("{i}") {
            (0..n_layers).map(Some).collect()
        } else {
            vec![None]
        };
        for i in layers {
            let fill = |s: &str| i.map_or(s.to_string(), |i| s.replace("{i}", &i.to_string()));
            let (source, target) = (fill(&rule.source), fill(&rule.target));
            let t = tensors.get(&source).ok_or_else(|| Error::CheckpointMismatch {
                tensor: source.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            let t = if rule.transpose { t.t()?.contiguous()? } else { t.clone() };
            out.insert(target, t.to_dtype(DType::F32)?);
        }
    }
    let metadata = BTreeMap::from([
        (META_DECODER_CONFIG.to_string(), serde_json::to_string(&config)?),
        (META_KIND.to_string(), "decoder".to_string()),
    ]);
    save_tensors(dst, &out, &metadata)?;
    Ok(config)
}

/// Load report for callers that want strictness details.
pub fn load_decoder_weights(store: &ParamStore, path: impl AsRef<Path>, strict: bool) -> Result<LoadReport> {
    let ck = load_checkpoint(path, &store.device())?;
    store.assign_under(&format!("{DECODER_PREFIX}/"), &ck.tensors, strict)
}
