use serde::{Deserialize, Serialize};

/// Caption text normalization shared by tokenization and metric scoring.
///
/// With both flags on: lowercase, punctuation removed (apostrophes and
/// word-internal hyphens survive), whitespace collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

impl Normalization {
    /// Whitespace collapsing only.
    pub const OFF: Normalization = Normalization {
        lowercase: false,
        strip_punctuation: false,
    };

    pub fn apply(&self, text: &str) -> String {
        self.words(text).join(" ")
    }

    pub fn words(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        };
        if !self.strip_punctuation {
            return text.split_whitespace().map(str::to_string).collect();
        }
        text.split(|c: char| c.is_whitespace() || (is_punct(c) && c != '\'' && c != '-'))
            .map(|w| w.trim_matches(|c| c == '\'' || c == '-'))
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect()
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '…' | '–' | '—')
}
