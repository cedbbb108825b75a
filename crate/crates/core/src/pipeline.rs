//! End-to-end runs built from a [`RunConfig`]: data planning, model
//! assembly, training, captioning, scoring and retrieval indexing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, Checkpoint, META_CONFIG_HASH, META_KIND};
use crate::config::{RunConfig, META_RUN_CONFIG};
use crate::dataset::{build_vocabulary, CaptionRecord, Collator, Normalization};
use crate::decoder::{Decoding, DecoderConfig, FrozenReport};
use crate::encoder::AudioEncoder;
use crate::eval::{evaluate, EvalCorpus, Metric, MetricReport};
use crate::eval::{Embedder, EmbedderKind, PrecomputedEmbedder, RetrievalIndex};
use crate::fixture::ensure_fixture_decoder;
use crate::model::{Codec, CaptionModel, ModelConfig};
use crate::nn::ParamStore;
use crate::train::{plan_plain, plan_setup, HistoryRecord, SetupPlan, Trainer};
use crate::{Error, Result};

pub const FIXTURE_DECODER_FILE: &str = "fixture_lm.safetensors";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const META_DOMAIN: &str = "domain";

/// Captions generated per forward pass.
const CAPTION_BATCH: usize = 16;

/// What a training run leaves behind, also written as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub setup: Option<String>,
    pub domain: String,
    pub train_pairs: usize,
    pub val_records: usize,
    pub test_records: usize,
    pub steps: usize,
    pub epochs: usize,
    pub stopped_early: bool,
    pub final_train_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub frozen_max_abs_diff: BTreeMap<String, f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub scores: BTreeMap<String, f64>,
}

pub fn plan(cfg: &RunConfig) -> Result<SetupPlan> {
    let test = cfg.paths.test_manifest.as_deref();
    match cfg.setup {
        Some(s) => plan_setup(s, &cfg.paths.train_manifests, test),
        None => plan_plain(&cfg.paths.train_manifests, test),
    }
}

/// The configured decoder checkpoint, or the fixture decoder (pretrained on
/// first use) inside the output directory.
pub fn decoder_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    match &cfg.paths.decoder {
        Some(p) => Ok(p.clone()),
        None => {
            std::fs::create_dir_all(&cfg.paths.out_dir).map_err(|e| Error::io(&cfg.paths.out_dir, e))?;
            ensure_fixture_decoder(cfg.paths.out_dir.join(FIXTURE_DECODER_FILE), &cfg.fixture)
        }
    }
}

fn fallback_codec(cfg: &RunConfig) -> Result<Option<Codec>> {
    match (&cfg.paths.gpt2_vocab, &cfg.paths.gpt2_merges) {
        (Some(v), Some(m)) => {
            let vocab = std::fs::read_to_string(v).map_err(|e| Error::io(v, e))?;
            let merges = std::fs::read_to_string(m).map_err(|e| Error::io(m, e))?;
            Ok(Some(Codec::gpt2(&vocab, &merges)?))
        }
        _ => Ok(None),
    }
}

/// Assembles the captioner for `cfg`. With header tuning the decoder header
/// is retuned onto a word vocabulary built from `train`.
pub fn build_model(cfg: &RunConfig, decoder: &Path, train: &[CaptionRecord]) -> Result<CaptionModel> {
    let store = ParamStore::new(cfg.train.seed, DType::F32, Device::Cpu);
    let model_cfg = ModelConfig {
        stft: cfg.stft.clone(),
        encoder: cfg.encoder.clone(),
        mapper: cfg.mapper.clone(),
        // replaced by the checkpoint's own configuration
        decoder: DecoderConfig::fixture(1),
        header_tuning: cfg.train.header_tuning,
    };
    let target = if cfg.train.header_tuning {
        Some(build_vocabulary(train, cfg.train.min_word_freq, Normalization::default())?)
    } else {
        None
    };
    let model = CaptionModel::with_pretrained_decoder(&store, model_cfg, decoder, fallback_codec(cfg)?, target)?;
    if let Some(enc) = &cfg.paths.encoder {
        let report = AudioEncoder::load_pretrained(&store, enc, false)?;
        log::info!("loaded pretrained encoder from {}: {report:?}", enc.display());
    }
    Ok(model)
}

/// Plans, trains, and (when a test set exists) captions and scores the test
/// set with the best checkpoint. Everything lands in `paths.out_dir`.
pub fn train_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let plan = plan(cfg)?;
    let mut train_cfg = cfg.train.clone();
    plan.apply(&mut train_cfg);
    if cfg.paths.encoder.is_some() {
        // pretrained statistics travel with the weights
        train_cfg.calibrate_input = false;
    }
    let mut effective = cfg.clone();
    effective.train = train_cfg.clone();
    let hash = effective.hash()?;
    let out_dir = cfg.paths.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let decoder = decoder_checkpoint(cfg)?;
    let model = build_model(&effective, &decoder, &plan.train)?;
    let collator = Collator::new(
        cfg.stft.clone(),
        train_cfg.audio_seconds()?,
        train_cfg.max_text_len,
        model.text_codec(),
        PathBuf::new(),
    )?;
    let train_examples = collator.examples(&plan.train)?;
    let val_examples = collator.examples(&plan.val)?;
    log::info!(
        "training on {} pairs ({} validation), {} test records",
        train_examples.len(),
        val_examples.len(),
        plan.test.len()
    );

    let mut metadata = BTreeMap::new();
    metadata.insert(META_CONFIG_HASH.to_string(), hash.clone());
    metadata.insert(META_RUN_CONFIG.to_string(), effective.canonical_json()?);
    metadata.insert(META_DOMAIN.to_string(), plan.domain_tag().to_string());
    let mut trainer = Trainer::new(model, train_cfg, train_examples, val_examples, Some(out_dir.clone()), metadata)?;
    let outcome = trainer.run()?;

    let mut summary = RunSummary {
        config_hash: hash.clone(),
        setup: plan.setup.map(|s| format!("{s:?}").to_lowercase()),
        domain: plan.domain_tag().into(),
        train_pairs: plan.train_pairs(),
        val_records: plan.val.len(),
        test_records: plan.test.len(),
        steps: outcome.state.step,
        epochs: outcome.state.epoch,
        stopped_early: outcome.state.stopped_early,
        final_train_loss: outcome.history.last().map(|h| h.train_loss),
        best_val_loss: best_val(&outcome.history),
        frozen_max_abs_diff: frozen_map(&outcome.frozen),
        best_checkpoint: outcome.best_checkpoint.clone(),
        last_checkpoint: outcome.last_checkpoint.clone(),
        report: None,
        scores: BTreeMap::new(),
    };

    if !plan.test.is_empty() {
        let best = outcome.best_checkpoint.as_ref().or(outcome.last_checkpoint.as_ref());
        let model = match best {
            Some(p) => CaptionModel::load(p, effective.train.seed, DType::F32, &Device::Cpu)?.0,
            None => trainer.model.clone(),
        };
        let captions = caption_records(&model, &collator, &plan.test, &cfg.decoding)?;
        write_captions(out_dir.join(CAPTIONS_FILE), &captions)?;
        let corpus = EvalCorpus::align(&captions, &plan.test)?;
        let mut report = evaluate(&corpus, &Metric::ALL, None, Normalization::default())?;
        stamp_report(&mut report, &hash, plan.domain_tag());
        let path = out_dir.join(REPORT_FILE);
        report.save(&path)?;
        summary.scores = report.scores.clone();
        summary.report = Some(path);
    }

    let path = out_dir.join(SUMMARY_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn best_val(history: &[HistoryRecord]) -> Option<f64> {
    history.iter().filter_map(|h| h.val_loss).reduce(f64::min)
}

fn frozen_map(report: &FrozenReport) -> BTreeMap<String, f64> {
    report.max_abs_diff.iter().map(|(g, d)| (g.to_string(), *d)).collect()
}

pub fn stamp_report(report: &mut MetricReport, config_hash: &str, domain: &str) {
    if let serde_json::Value::Object(map) = &mut report.config {
        map.insert("config_hash".into(), config_hash.into());
        map.insert("domain".into(), domain.into());
    }
}

/// Greedy or beam captions for every record, keyed by audio id.
pub fn caption_records(
    model: &CaptionModel,
    collator: &Collator,
    records: &[CaptionRecord],
    decoding: &Decoding,
) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for chunk in records.chunks(CAPTION_BATCH) {
        let specs = chunk.iter().map(|r| collator.spectrogram(r)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = specs.iter().collect();
        for (r, caption) in chunk.iter().zip(model.caption(&refs, decoding)?) {
            if out.insert(r.audio_id.clone(), caption).is_some() {
                return Err(Error::DuplicateAudioId(r.audio_id.clone()));
            }
        }
    }
    Ok(out)
}

pub fn write_captions(path: impl AsRef<Path>, captions: &BTreeMap<String, String>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (id, caption) in captions {
        text.push_str(&serde_json::to_string(&serde_json::json!({"audio_id": id, "caption": caption}))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A trained model loaded for inference, with the settings it was trained
/// under.
pub struct LoadedModel {
    pub model: CaptionModel,
    pub checkpoint: Checkpoint,
    pub run_config: Option<RunConfig>,
}

impl LoadedModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let checkpoint = load_checkpoint(path, &Device::Cpu)?;
        let run_config = match checkpoint.metadata.get(META_RUN_CONFIG) {
            Some(text) => Some(
                serde_json::from_str::<RunConfig>(text)
                    .map_err(|e| Error::ConfigMismatch(format!("embedded run config: {e}")))?,
            ),
            None => None,
        };
        let seed = run_config.as_ref().map_or(0, |c| c.train.seed);
        let model = CaptionModel::from_checkpoint(&checkpoint, seed, DType::F32, &Device::Cpu)?;
        Ok(Self {
            model,
            checkpoint,
            run_config,
        })
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.checkpoint.metadata.get(META_CONFIG_HASH).map(String::as_str)
    }

    /// Clip length used in training; 30 s when the checkpoint does not say.
    pub fn audio_seconds(&self) -> f64 {
        self.run_config
            .as_ref()
            .and_then(|c| c.train.audio_seconds().ok())
            .unwrap_or(30.0)
    }

    pub fn decoding(&self) -> Decoding {
        self.run_config.as_ref().map(|c| c.decoding).unwrap_or_default()
    }

    /// Collator matching training-time preprocessing; relative audio paths
    /// resolve against `base_dir`.
    pub fn collator(&self, base_dir: impl Into<PathBuf>) -> Result<Collator> {
        let max_len = self.run_config.as_ref().map_or(32, |c| c.train.max_text_len);
        Collator::new(
            self.model.config.stft.clone(),
            self.audio_seconds(),
            max_len,
            self.model.text_codec(),
            base_dir,
        )
    }
}

/// Captions `records` with `model` and indexes the captions. Without
/// `precomputed` a TF-IDF embedder is fitted on the generated captions.
pub fn build_retrieval_index(
    loaded: &LoadedModel,
    collator: &Collator,
    records: &[CaptionRecord],
    decoding: &Decoding,
    precomputed: Option<&Path>,
) -> Result<RetrievalIndex> {
    let captions: Vec<(String, String)> = caption_records(&loaded.model, collator, records, decoding)?.into_iter().collect();
    let mut index = match precomputed {
        Some(p) => {
            let embedder = PrecomputedEmbedder::load(p)?;
            RetrievalIndex::build(captions, &embedder, EmbedderKind::Precomputed { source: p.to_path_buf() })?
        }
        None => RetrievalIndex::build_tfidf(captions)?,
    };
    index.config_hash = loaded.config_hash().map(str::to_string);
    Ok(index)
}

pub fn query_index(index: &RetrievalIndex, query: &str, k: usize) -> Result<Vec<(String, f64)>> {
    let embedder: Box<dyn Embedder> = index.embedder.instantiate()?;
    index.retrieve(query, embedder.as_ref(), k)
}

/// Artifact summary printed by `inspect`.
#[derive(Debug, Clone, Serialize)]
pub struct Inspection {
    pub path: PathBuf,
    pub kind: String,
    pub config_hash: Option<String>,
    /// Whether the stored hash matches the embedded run config, when both
    /// are present.
    pub hash_verified: Option<bool>,
    pub details: serde_json::Value,
}

/// Describes a checkpoint, metric report or retrieval index.
pub fn inspect(path: impl AsRef<Path>) -> Result<Inspection> {
    let path = path.as_ref();
    let is_safetensors = path.extension().is_some_and(|e| e == "safetensors");
    if is_safetensors {
        let ck = load_checkpoint(path, &Device::Cpu)?;
        let hash = ck.metadata.get(META_CONFIG_HASH).cloned();
        let verified = match (&hash, ck.metadata.get(META_RUN_CONFIG)) {
            (Some(h), Some(text)) => {
                let cfg: RunConfig = serde_json::from_str(text)
                    .map_err(|e| Error::ConfigMismatch(format!("embedded run config: {e}")))?;
                Some(&cfg.hash()? == h)
            }
            _ => None,
        };
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0usize;
        for (name, t) in &ck.tensors {
            let n = t.elem_count();
            total += n;
            let top = name.split('/').next().unwrap_or(name).to_string();
            *groups.entry(top).or_default() += n;
        }
        let keys: Vec<&String> = ck.metadata.keys().collect();
        return Ok(Inspection {
            path: path.into(),
            kind: ck.metadata.get(META_KIND).cloned().unwrap_or_else(|| "tensors".into()),
            config_hash: hash,
            hash_verified: verified,
            details: serde_json::json!({
                "tensors": ck.tensors.len(),
                "elements": total,
                "elements_by_prefix": groups,
                "metadata_keys": keys,
            }),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if let Ok(index) = serde_json::from_value::<RetrievalIndex>(value.clone()) {
        return Ok(Inspection {
            path: path.into(),
            kind: "retrieval_index".into(),
            config_hash: index.config_hash.clone(),
            hash_verified: None,
            details: serde_json::json!({"entries": index.len(), "embedder": index.embedder_id}),
        });
    }
    if let Ok(report) = serde_json::from_value::<MetricReport>(value.clone()) {
        return Ok(Inspection {
            path: path.into(),
            kind: "metric_report".into(),
            config_hash: report.config.get("config_hash").and_then(|v| v.as_str()).map(str::to_string),
            hash_verified: None,
            details: serde_json::json!({"scores": report.scores, "flags": report.partial_flags}),
        });
    }
    if let Ok(summary) = serde_json::from_value::<RunSummary>(value) {
        return Ok(Inspection {
            path: path.into(),
            kind: "run_summary".into(),
            config_hash: Some(summary.config_hash.clone()),
            hash_verified: None,
            details: serde_json::to_value(&summary)?,
        });
    }
    Err(Error::InvalidArgument(format!("{}: not a checkpoint, report, index or run summary", path.display())))
}
