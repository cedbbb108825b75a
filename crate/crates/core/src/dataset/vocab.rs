use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::{CaptionRecord, Normalization, TextCodec};
use crate::{Error, Result};

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
const N_SPECIAL: usize = 4;

/// Word-level vocabulary. Ids 0..4 are BOS, EOS, PAD, UNK; regular tokens follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    normalization: Normalization,
}

impl Vocabulary {
    /// Builds a vocabulary from regular tokens, in the given order. Duplicates
    /// and special-token spellings are dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = [BOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut index: HashMap<String, u32> = all.iter().cloned().zip(0..).collect();
        for t in tokens {
            let t = t.into();
            if !index.contains_key(&t) {
                index.insert(t.clone(), all.len() as u32);
                all.push(t);
            }
        }
        Self {
            tokens: all,
            index,
            normalization: Normalization::default(),
        }
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == N_SPECIAL
    }

    /// Regular (non-special) tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[N_SPECIAL..]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Writes the header line of special tokens, then one regular token per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.tokens[..N_SPECIAL].join("\t");
        out.push('\n');
        for t in self.regular_tokens() {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
        if header != [BOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN] {
            return Err(Error::InvalidArgument(format!(
                "vocabulary header must list {BOS_TOKEN} {EOS_TOKEN} {PAD_TOKEN} {UNK_TOKEN}, got {header:?}"
            )));
        }
        let tokens: Vec<&str> = lines.collect();
        let vocab = Self::from_tokens(tokens.iter().copied());
        if vocab.len() != tokens.len() + N_SPECIAL {
            return Err(Error::InvalidArgument("vocabulary file repeats a token".into()));
        }
        Ok(vocab)
    }

    /// Newline-joined serialization used for embedding into checkpoints.
    pub fn to_text(&self) -> String {
        let mut out = self.tokens[..N_SPECIAL].join("\t");
        for t in self.regular_tokens() {
            out.push('\n');
            out.push_str(t);
        }
        out
    }
}

impl TextCodec for Vocabulary {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK_ID)).collect()
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, BOS_ID | EOS_ID | PAD_ID))
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.len()
    }

    fn bos_id(&self) -> u32 {
        BOS_ID
    }

    fn eos_id(&self) -> u32 {
        EOS_ID
    }

    fn pad_id(&self) -> u32 {
        PAD_ID
    }

    fn normalization(&self) -> Normalization {
        self.normalization
    }

    fn piece(&self, id: u32) -> Option<String> {
        self.token(id).map(str::to_string)
    }
}

/// Target vocabulary for header tuning: every token occurring at least
/// `min_freq` times across all normalized captions, ordered by frequency
/// (descending) then lexicographically.
pub fn build_vocabulary(records: &[CaptionRecord], min_freq: usize, normalization: Normalization) -> Result<Vocabulary> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for caption in records.iter().flat_map(|r| &r.captions) {
        for w in normalization.words(caption) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t)).with_normalization(normalization))
}
