use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Normalization;
use crate::{Error, Result};

/// Sentence embedding used to compare queries with indexed captions.
pub trait Embedder {
    fn id(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

fn l2_normalize(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x = (*x as f64 / n) as f32;
        }
    }
    v
}

/// Character n-gram TF-IDF embedding fitted on the indexed captions.
/// Deterministic and dependency-free; n-grams unseen at fit time are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfEmbedder {
    pub n: usize,
    grams: BTreeMap<String, (usize, f64)>,
}

impl TfIdfEmbedder {
    pub const DEFAULT_N: usize = 3;

    fn grams(&self, text: &str) -> Vec<String> {
        char_ngrams(text, self.n)
    }

    /// Smoothed IDF: ln((1 + docs) / (1 + df)) + 1.
    pub fn fit<S: AsRef<str>>(texts: &[S], n: usize) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            let mut seen: Vec<String> = char_ngrams(t.as_ref(), n);
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let docs = texts.len() as f64;
        let grams = df
            .into_iter()
            .enumerate()
            .map(|(i, (g, d))| (g, (i, ((1.0 + docs) / (1.0 + d as f64)).ln() + 1.0)))
            .collect();
        Self { n, grams }
    }

    pub fn dim(&self) -> usize {
        self.grams.len()
    }
}

fn char_ngrams(text: &str, n: usize) -> Vec<String> {
    let norm = Normalization::default().apply(text);
    let chars: Vec<char> = format!(" {norm} ").chars().collect();
    if chars.len() < n {
        return Vec::new();
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

impl Embedder for TfIdfEmbedder {
    fn id(&self) -> String {
        format!("tfidf-char{}", self.n)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut v = vec![0f32; self.dim()];
        for g in self.grams(text) {
            if let Some((i, idf)) = self.grams.get(&g) {
                v[*i] += *idf as f32;
            }
        }
        Ok(l2_normalize(v))
    }
}

/// Embeddings computed elsewhere (e.g. by a sentence-transformer), read
/// from JSON lines `{text, embedding}`. Lookup is on normalized text.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    source: PathBuf,
    table: HashMap<String, Vec<f32>>,
}

impl PrecomputedEmbedder {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            text: String,
            embedding: Vec<f32>,
        }
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let norm = Normalization::default();
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::MalformedManifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let l: Line = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
            if *dim.get_or_insert(l.embedding.len()) != l.embedding.len() || l.embedding.is_empty() {
                return Err(bad("inconsistent embedding width".into()));
            }
            table.insert(norm.apply(&l.text), l.embedding);
        }
        Ok(Self {
            source: path.to_path_buf(),
            table,
        })
    }
}

impl Embedder for PrecomputedEmbedder {
    fn id(&self) -> String {
        format!("precomputed:{}", self.source.display())
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        self.table
            .get(&Normalization::default().apply(text))
            .map(|v| l2_normalize(v.clone()))
            .ok_or_else(|| Error::InvalidArgument(format!("no precomputed embedding for {text:?}")))
    }
}

/// How the index's embeddings were produced, with enough state to embed
/// queries the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderKind {
    TfIdf(TfIdfEmbedder),
    Precomputed { source: PathBuf },
}

impl EmbedderKind {
    pub fn instantiate(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            EmbedderKind::TfIdf(e) => Box::new(e.clone()),
            EmbedderKind::Precomputed { source } => Box::new(PrecomputedEmbedder::load(source)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub audio_id: String,
    pub caption: String,
    pub embedding: Vec<f32>,
}

/// One generated caption per audio with its unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub embedder: EmbedderKind,
    pub embedder_id: String,
    pub entries: Vec<IndexEntry>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl RetrievalIndex {
    /// Indexes `(audio_id, caption)` pairs with a TF-IDF embedder fitted on
    /// the captions.
    pub fn build_tfidf(captions: Vec<(String, String)>) -> Result<Self> {
        let texts: Vec<&str> = captions.iter().map(|(_, c)| c.as_str()).collect();
        let embedder = TfIdfEmbedder::fit(&texts, TfIdfEmbedder::DEFAULT_N);
        Self::build(captions, &embedder, EmbedderKind::TfIdf(embedder.clone()))
    }

    pub fn build(captions: Vec<(String, String)>, embedder: &dyn Embedder, kind: EmbedderKind) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut entries = Vec::with_capacity(captions.len());
        for (audio_id, caption) in captions {
            if !seen.insert(audio_id.clone()) {
                return Err(Error::DuplicateAudioId(audio_id));
            }
            let embedding = l2_normalize(embedder.embed(&caption).map_err(|e| match e {
                Error::InvalidArgument(r) => Error::InvalidArgument(format!("{audio_id}: {r}")),
                other => other,
            })?);
            entries.push(IndexEntry {
                audio_id,
                caption,
                embedding,
            });
        }
        Ok(Self {
            embedder: kind,
            embedder_id: embedder.id(),
            entries,
            config_hash: None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&data)?)
    }

    /// Ranks every indexed audio by cosine similarity to `embedding`
    /// (descending, ties by audio_id ascending).
    pub fn rank(&self, embedding: &[f32]) -> Result<Vec<(String, f64)>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let mut scored: Vec<(String, f64)> = self
            .entries
            .iter()
            .map(|e| {
                let dot: f64 = e.embedding.iter().zip(embedding).map(|(a, b)| *a as f64 * *b as f64).sum();
                (e.audio_id.clone(), dot)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(scored)
    }

    /// Top-`k` audio ids for a text query.
    pub fn retrieve(&self, query: &str, embedder: &dyn Embedder, k: usize) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let q = l2_normalize(embedder.embed(query)?);
        let mut ranked = self.rank(&q)?;
        ranked.truncate(k);
        Ok(ranked)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldQuery {
    pub query: String,
    pub gold_audio_id: String,
}

/// Reads JSON lines `{query, gold_audio_id}`.
pub fn load_gold(path: impl AsRef<Path>) -> Result<Vec<GoldQuery>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedManifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Fraction of queries whose gold audio is among the top `k`. Queries whose
/// gold audio is not indexed count as misses.
pub fn recall_at_k(queries: &[GoldQuery], index: &RetrievalIndex, embedder: &dyn Embedder, k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut hits = 0usize;
    for q in queries {
        if index.retrieve(&q.query, embedder, k)?.iter().any(|(id, _)| *id == q.gold_audio_id) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index() -> RetrievalIndex {
        RetrievalIndex::build_tfidf(vec![
            ("a".into(), "a dog barks in the yard".into()),
            ("b".into(), "rain falls on a tin roof".into()),
            ("c".into(), "a car engine idles".into()),
        ])
        .unwrap()
    }

    #[test]
    fn self_retrieval_and_missing_gold() {
        let idx = index();
        let emb = idx.embedder.instantiate().unwrap();
        let q = |query: &str, gold: &str| GoldQuery {
            query: query.into(),
            gold_audio_id: gold.into(),
        };
        let qs = vec![q("a dog barks in the yard", "a"), q("rain falls on a tin roof", "b"), q("a car engine idles", "c")];
        assert_eq!(recall_at_k(&qs, &idx, emb.as_ref(), 1).unwrap(), 1.0);
        let missing = vec![q("a dog barks", "zzz")];
        assert_eq!(recall_at_k(&missing, &idx, emb.as_ref(), 3).unwrap(), 0.0);
    }

    #[test]
    fn embeddings_are_unit_norm_and_roundtrip() {
        let idx = index();
        for e in &idx.entries {
            let n: f64 = e.embedding.iter().map(|x| (*x as f64).powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.json");
        idx.save(&p).unwrap();
        assert_eq!(RetrievalIndex::load(&p).unwrap(), idx);
    }

    #[test]
    fn ties_break_by_audio_id_and_empty_index_errors() {
        let idx = RetrievalIndex {
            embedder: EmbedderKind::TfIdf(TfIdfEmbedder::fit(&["x"], 3)),
            embedder_id: "t".into(),
            entries: vec![
                IndexEntry {
                    audio_id: "z".into(),
                    caption: "same".into(),
                    embedding: vec![1.0, 0.0],
                },
                IndexEntry {
                    audio_id: "m".into(),
                    caption: "same".into(),
                    embedding: vec![1.0, 0.0],
                },
            ],
            config_hash: None,
        };
        let r = idx.rank(&[1.0, 0.0]).unwrap();
        assert_eq!(r[0].0, "m");
        let empty = RetrievalIndex {
            entries: vec![],
            ..idx
        };
        assert!(matches!(empty.rank(&[1.0]), Err(Error::EmptyIndex)));
    }
}
