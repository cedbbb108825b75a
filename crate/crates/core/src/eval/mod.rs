//! Caption metrics and caption-mediated text-to-audio retrieval.

mod corpus;
mod metrics;
mod retrieval;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use corpus::{load_candidates, EvalCorpus, EvalEntry};
pub use metrics::{CIDER_SIGMA, METEOR_ALPHA, METEOR_BETA, METEOR_GAMMA, ROUGE_BETA};
pub use retrieval::{
    load_gold, recall_at_k, Embedder, EmbedderKind, GoldQuery, IndexEntry, PrecomputedEmbedder, RetrievalIndex,
    TfIdfEmbedder,
};

use crate::dataset::Normalization;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    RougeL,
    Cider,
    MeteorLite,
    Spider,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Bleu, Metric::RougeL, Metric::Cider, Metric::MeteorLite, Metric::Spider];
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "bleu" => Metric::Bleu,
            "rouge_l" | "rouge" => Metric::RougeL,
            "cider" | "cider_d" => Metric::Cider,
            "meteor_lite" | "meteor" => Metric::MeteorLite,
            "spider" => Metric::Spider,
            other => return Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        })
    }
}

pub const SPICE_MISSING: &str = "spice-missing";

/// Corpus scores keyed by metric name (`bleu_1`..`bleu_4`, `rouge_l`,
/// `cider`, `meteor_lite`, `spice`, `spider`), per-sample scores where they
/// exist, and flags for anything computed from incomplete inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scores: BTreeMap<String, f64>,
    pub per_sample: BTreeMap<String, BTreeMap<String, f64>>,
    pub partial_flags: Vec<String>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn score(&self, name: &str) -> Option<f64> {
        self.scores.get(name).copied()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// SPIDEr: the mean of SPICE and CIDEr.
pub fn spider(cider: f64, spice: f64) -> f64 {
    (cider + spice) / 2.0
}

/// Reads a SPICE sidecar: JSON lines `{audio_id, spice}`.
pub fn load_spice(path: impl AsRef<Path>) -> Result<BTreeMap<String, f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spice(&text)
}

pub fn parse_spice(text: &str) -> Result<BTreeMap<String, f64>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Line {
        audio_id: String,
        spice: f64,
    }
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::MalformedSpiceFile { line: i + 1, reason };
        let l: Line = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        if !(0.0..=1.0).contains(&l.spice) {
            return Err(bad(format!("spice {} outside [0, 1]", l.spice)));
        }
        if out.insert(l.audio_id.clone(), l.spice).is_some() {
            return Err(bad(format!("duplicate audio_id {}", l.audio_id)));
        }
    }
    Ok(out)
}

/// Scores `corpus` on `metrics`. SPIDEr needs per-audio SPICE scores; without
/// them the report carries CIDEr alone and the `spice-missing` flag.
pub fn evaluate(
    corpus: &EvalCorpus,
    metrics: &[Metric],
    spice: Option<&BTreeMap<String, f64>>,
    normalization: Normalization,
) -> Result<MetricReport> {
    let tokens = corpus.tokenized(&normalization)?;
    let mut report = MetricReport {
        config: serde_json::json!({
            "normalization": normalization,
            "rouge_beta": ROUGE_BETA,
            "cider_sigma": CIDER_SIGMA,
            "meteor": {"alpha": METEOR_ALPHA, "beta": METEOR_BETA, "gamma": METEOR_GAMMA, "matchers": ["exact", "stem"]},
            "bleu_smoothing": "none",
        }),
        ..Default::default()
    };
    let mut per_sample = |name: &str, values: &[f64]| -> f64 {
        let map = corpus
            .entries
            .iter()
            .zip(values)
            .map(|(e, v)| (e.audio_id.clone(), *v))
            .collect();
        report.per_sample.insert(name.to_string(), map);
        values.iter().sum::<f64>() / values.len() as f64
    };
    let mut scores = BTreeMap::new();
    let want = |m: Metric| metrics.contains(&m);
    if want(Metric::Bleu) {
        for (n, b) in metrics::bleu(&tokens, 4).into_iter().enumerate() {
            scores.insert(format!("bleu_{}", n + 1), b);
        }
    }
    if want(Metric::RougeL) {
        let v: Vec<f64> = tokens.iter().map(metrics::rouge_l).collect();
        scores.insert("rouge_l".into(), per_sample("rouge_l", &v));
    }
    if want(Metric::MeteorLite) {
        let stem = metrics::english_stemmer();
        let v: Vec<f64> = tokens.iter().map(|t| metrics::meteor_lite(t, &stem)).collect();
        scores.insert("meteor_lite".into(), per_sample("meteor_lite", &v));
    }
    if want(Metric::Cider) || want(Metric::Spider) {
        if corpus.len() < 2 {
            log::warn!("CIDEr on a single-document corpus: every IDF weight is zero");
        }
        let v = metrics::cider_d(&tokens);
        let cider = per_sample("cider", &v);
        scores.insert("cider".into(), cider);
        if want(Metric::Spider) {
            let covered = spice.filter(|s| corpus.entries.iter().all(|e| s.contains_key(&e.audio_id)));
            match covered {
                Some(s) => {
                    let vals: Vec<f64> = corpus.entries.iter().map(|e| s[&e.audio_id]).collect();
                    let sp = per_sample("spice", &vals);
                    scores.insert("spice".into(), sp);
                    scores.insert("spider".into(), spider(cider, sp));
                }
                None => {
                    if let Some(s) = spice {
                        let missing: Vec<String> = corpus
                            .entries
                            .iter()
                            .filter(|e| !s.contains_key(&e.audio_id))
                            .map(|e| e.audio_id.clone())
                            .collect();
                        return Err(Error::IdMismatch(missing));
                    }
                    report.partial_flags.push(SPICE_MISSING.into());
                }
            }
        }
    }
    report.scores = scores;
    Ok(report)
}
