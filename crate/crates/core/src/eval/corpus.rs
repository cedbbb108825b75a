use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CaptionRecord, Normalization};
use crate::{Error, Result};

/// One scored item: a generated caption and its references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalEntry {
    pub audio_id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

/// A candidate/reference corpus. Candidates may be empty; every entry needs
/// at least one reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalCorpus {
    pub entries: Vec<EvalEntry>,
}

/// Token form of an entry after normalization.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tokenized {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalCorpus {
    pub fn new(entries: Vec<EvalEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| e.references.is_empty()) {
            return Err(Error::InvalidArgument(format!("{}: no reference captions", e.audio_id)));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn tokenized(&self, norm: &Normalization) -> Result<Vec<Tokenized>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(self
            .entries
            .iter()
            .map(|e| Tokenized {
                candidate: norm.words(&e.candidate),
                references: e.references.iter().map(|r| norm.words(r)).collect(),
            })
            .collect())
    }

    /// Reads JSON lines `{audio_id, candidate, references}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: EvalEntry = serde_json::from_str(line).map_err(|e| Error::MalformedManifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Pairs candidates (audio_id → caption) with manifest references. Every
    /// id must appear on both sides; the offending ids are listed otherwise.
    pub fn align(candidates: &BTreeMap<String, String>, references: &[CaptionRecord]) -> Result<Self> {
        let refs: BTreeMap<&str, &CaptionRecord> = references.iter().map(|r| (r.audio_id.as_str(), r)).collect();
        let cand_ids: BTreeSet<&str> = candidates.keys().map(String::as_str).collect();
        let ref_ids: BTreeSet<&str> = refs.keys().copied().collect();
        let mismatched: Vec<String> = cand_ids
            .symmetric_difference(&ref_ids)
            .map(|s| s.to_string())
            .collect();
        if !mismatched.is_empty() {
            return Err(Error::IdMismatch(mismatched));
        }
        Self::new(
            references
                .iter()
                .map(|r| EvalEntry {
                    audio_id: r.audio_id.clone(),
                    candidate: candidates[&r.audio_id].clone(),
                    references: r.captions.clone(),
                })
                .collect(),
        )
    }
}

/// Reads generated captions as JSON lines `{audio_id, caption}`.
pub fn load_candidates(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    #[derive(Deserialize)]
    struct Line {
        audio_id: String,
        caption: String,
    }
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(line).map_err(|e| Error::MalformedManifest {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if out.insert(l.audio_id.clone(), l.caption).is_some() {
            return Err(Error::DuplicateAudioId(l.audio_id));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;

    #[test]
    fn align_lists_missing_ids() {
        let refs = vec![
            CaptionRecord {
                audio_id: "a".into(),
                audio_path: "a.wav".into(),
                captions: vec!["x".into()],
                split: Split::Test,
            },
            CaptionRecord {
                audio_id: "b".into(),
                audio_path: "b.wav".into(),
                captions: vec!["y".into()],
                split: Split::Test,
            },
        ];
        let mut cands = BTreeMap::new();
        cands.insert("a".to_string(), "x".to_string());
        cands.insert("c".to_string(), "z".to_string());
        match EvalCorpus::align(&cands, &refs) {
            Err(Error::IdMismatch(ids)) => assert_eq!(ids, vec!["b".to_string(), "c".to_string()]),
            other => panic!("{other:?}"),
        }
        cands.remove("c");
        cands.insert("b".into(), "".into());
        let corpus = EvalCorpus::align(&cands, &refs).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.entries[1].candidate, "");
    }
}
