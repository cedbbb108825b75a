use std::collections::HashMap;
use std::path::Path;

use super::Normalization;
use crate::{Error, Result};

/// Maps caption text to decoder token ids and back.
pub trait TextCodec: Send + Sync + std::fmt::Debug {
    /// Encodes already-normalized text into content token ids (no BOS/EOS).
    fn encode(&self, text: &str) -> Vec<u32>;
    /// Decodes ids into text, skipping BOS/EOS/PAD.
    fn decode(&self, ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
    fn bos_id(&self) -> u32;
    fn eos_id(&self) -> u32;
    fn pad_id(&self) -> u32;

    fn normalization(&self) -> Normalization {
        Normalization::default()
    }

    /// Ids of `word` as it appears inside a sentence.
    fn encode_word(&self, word: &str) -> Vec<u32> {
        self.encode(word)
    }

    /// Surface string of a single id, if it has one.
    fn piece(&self, id: u32) -> Option<String>;
}

/// Token ids of one caption, framed by BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Decoder inputs: everything but the final token.
    pub fn inputs(&self) -> &[u32] {
        &self.0[..self.0.len().saturating_sub(1)]
    }

    /// Prediction targets: everything but BOS.
    pub fn targets(&self) -> &[u32] {
        &self.0[1.min(self.0.len())..]
    }
}

/// Normalizes `text` with the codec's rules and frames it with BOS/EOS.
pub fn tokenize(text: &str, codec: &dyn TextCodec) -> TokenSequence {
    let normalized = codec.normalization().apply(text);
    let mut ids = Vec::with_capacity(normalized.len() / 3 + 2);
    ids.push(codec.bos_id());
    ids.extend(codec.encode(&normalized));
    ids.push(codec.eos_id());
    TokenSequence(ids)
}

pub fn detokenize(seq: &TokenSequence, codec: &dyn TextCodec) -> String {
    codec.decode(seq.ids())
}

const ENDOFTEXT: &str = "<|endoftext|>";

/// GPT-2 byte-level BPE, loaded from the standard `vocab.json` + `merges.txt` pair.
#[derive(Debug, Clone)]
pub struct Gpt2Codec {
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    endoftext: u32,
    normalization: Normalization,
}

impl Gpt2Codec {
    pub fn from_files(vocab_json: impl AsRef<Path>, merges_txt: impl AsRef<Path>) -> Result<Self> {
        let (vp, mp) = (vocab_json.as_ref(), merges_txt.as_ref());
        let vocab = std::fs::read_to_string(vp).map_err(|e| Error::io(vp, e))?;
        let merges = std::fs::read_to_string(mp).map_err(|e| Error::io(mp, e))?;
        Self::from_strs(&vocab, &merges)
    }

    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let encoder: HashMap<String, u32> = serde_json::from_str(vocab_json)?;
        let size = encoder.values().map(|&v| v as usize + 1).max().unwrap_or(0);
        let mut decoder = vec![String::new(); size];
        for (k, &v) in &encoder {
            decoder[v as usize] = k.clone();
        }
        let ranks = merges_txt
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .enumerate()
            .filter_map(|(i, l)| {
                let mut it = l.split(' ');
                Some(((it.next()?.to_string(), it.next()?.to_string()), i))
            })
            .collect();
        let endoftext = *encoder
            .get(ENDOFTEXT)
            .ok_or_else(|| Error::InvalidArgument(format!("vocab.json has no {ENDOFTEXT} entry")))?;
        let byte_to_char = bytes_to_unicode();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(Self {
            encoder,
            decoder,
            ranks,
            byte_to_char,
            char_to_byte,
            endoftext,
            normalization: Normalization::default(),
        })
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && self.ranks.get(&(parts[i].clone(), parts[i + 1].clone())) == Some(&rank) {
                    merged.push(format!("{}{}", parts[i], parts[i + 1]));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }
}

impl TextCodec for Gpt2Codec {
    fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for chunk in pretokenize(text) {
            let mapped: String = chunk.bytes().map(|b| self.byte_to_char[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                match self.encoder.get(&piece) {
                    Some(&id) => ids.push(id),
                    // incomplete vocabularies: fall back to single byte symbols
                    None => ids.extend(piece.chars().filter_map(|c| self.encoder.get(&c.to_string()).copied())),
                }
            }
        }
        ids
    }

    fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id != self.endoftext)
            .filter_map(|&id| self.decoder.get(id as usize))
            .flat_map(|piece| piece.chars())
            .filter_map(|c| self.char_to_byte.get(&c).copied())
            .collect();
        String::from_utf8_lossy(&bytes).trim().to_string()
    }

    fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    fn bos_id(&self) -> u32 {
        self.endoftext
    }

    fn eos_id(&self) -> u32 {
        self.endoftext
    }

    fn pad_id(&self) -> u32 {
        self.endoftext
    }

    fn normalization(&self) -> Normalization {
        self.normalization
    }

    fn encode_word(&self, word: &str) -> Vec<u32> {
        self.encode(&format!(" {word}"))
    }

    fn piece(&self, id: u32) -> Option<String> {
        self.decoder.get(id as usize).map(|p| {
            let bytes: Vec<u8> = p.chars().filter_map(|c| self.char_to_byte.get(&c).copied()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        })
    }
}

/// GPT-2's reversible byte -> printable unicode table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
    let mut extra = 0;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

#[derive(PartialEq, Clone, Copy)]
enum Class {
    Letter,
    Number,
    Other,
    Space,
}

fn class(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Number
    } else {
        Class::Other
    }
}

/// Splits text like GPT-2's pre-tokenizer pattern
/// `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`.
pub fn pretokenize(text: &str) -> Vec<&str> {
    const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = byte_at(i);
        if let Some(c) = CONTRACTIONS.iter().find(|c| text[start..].starts_with(**c)) {
            i += c.chars().count();
            out.push(&text[start..byte_at(i)]);
            continue;
        }
        let (c0, with_space) = match chars[i].1 {
            ' ' if i + 1 < chars.len() && class(chars[i + 1].1) != Class::Space => (chars[i + 1].1, true),
            c => (c, false),
        };
        let cls = class(c0);
        if cls != Class::Space {
            let mut j = i + usize::from(with_space);
            while j < chars.len() && class(chars[j].1) == cls {
                j += 1;
            }
            out.push(&text[start..byte_at(j)]);
            i = j;
            continue;
        }
        let mut j = i;
        while j < chars.len() && class(chars[j].1) == Class::Space {
            j += 1;
        }
        if j < chars.len() && j - i > 1 {
            j -= 1;
        }
        out.push(&text[start..byte_at(j)]);
        i = j;
    }
    out
}
