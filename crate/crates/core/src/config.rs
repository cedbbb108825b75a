//! Run configuration: one TOML document with a section per module, plus
//! `section.key=value` overrides. Its hash is stamped on every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::StftConfig;
use crate::checkpoint::sha256_hex;
use crate::decoder::Decoding;
use crate::encoder::EncoderConfig;
use crate::fixture::FixtureLmConfig;
use crate::mapper::MapperConfig;
use crate::train::{Profile, Setup, TrainConfig};
use crate::{Error, Result};

pub const META_RUN_CONFIG: &str = "run_config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Training manifests (JSON lines); train/val splits are taken from them.
    pub train_manifests: Vec<PathBuf>,
    /// Evaluation manifest; defaults to the test split of the training manifests.
    pub test_manifest: Option<PathBuf>,
    /// Pretrained decoder checkpoint. Without one a fixture decoder is
    /// pretrained (or reused) at `out_dir/fixture_lm.safetensors`.
    pub decoder: Option<PathBuf>,
    /// Tokenizer files for decoders imported without an embedded codec.
    pub gpt2_vocab: Option<PathBuf>,
    pub gpt2_merges: Option<PathBuf>,
    /// Pretrained encoder weights (bare or `encoder/`-prefixed names).
    pub encoder: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train_manifests: Vec::new(),
            test_manifest: None,
            decoder: None,
            gpt2_vocab: None,
            gpt2_merges: None,
            encoder: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Experimental setup; unset means plain training on the given manifests.
    pub setup: Option<Setup>,
    pub paths: PathsConfig,
    pub stft: StftConfig,
    pub encoder: EncoderConfig,
    pub mapper: MapperConfig,
    pub train: TrainConfig,
    pub decoding: Decoding,
    pub fixture: FixtureLmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            setup: None,
            paths: PathsConfig::default(),
            stft: StftConfig::default(),
            encoder: EncoderConfig::full(),
            mapper: MapperConfig::default(),
            train: TrainConfig::default(),
            decoding: Decoding::default(),
            fixture: FixtureLmConfig::default(),
        }
    }
}

fn config_error(path: String, reason: String) -> Error {
    let key = match reason.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
        Some(field) if path.is_empty() || path == "." => field.to_string(),
        Some(field) if !path.ends_with(field) => format!("{path}.{field}"),
        _ => path,
    };
    Error::Config { key, reason }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `dotted.key.path` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        key: assignment.into(),
        reason: "override must look like section.key=value".into(),
    })?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config {
            key: key.into(),
            reason: "empty key segment".into(),
        });
    }
    let mut node = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| Error::Config {
            key: parts[..=i].join("."),
            reason: "not a section".into(),
        })?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Small settings for the synthetic fixture pipeline.
    pub fn toy() -> Self {
        Self {
            stft: StftConfig::toy(),
            encoder: EncoderConfig::toy(),
            mapper: MapperConfig::toy(),
            train: TrainConfig {
                profile: Profile::Custom,
                batch_size: Some(8),
                weight_decay: Some(0.0),
                audio_seconds: Some(1.0),
                peak_lr: 1e-3,
                warmup_steps: Some(20),
                max_epochs: 20,
                max_text_len: 16,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: String::new(),
            reason: e.message().to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| config_error(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        paths.train_manifests.iter_mut().for_each(fix);
        for p in [
            &mut paths.test_manifest,
            &mut paths.decoder,
            &mut paths.gpt2_vocab,
            &mut paths.gpt2_merges,
            &mut paths.encoder,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut paths.out_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.encoder.validate()?;
        self.mapper.validate()?;
        self.train.validate()?;
        self.fixture.validate()?;
        if self.stft.n_mels != self.encoder.n_mels {
            return Err(Error::Config {
                key: "encoder.n_mels".into(),
                reason: format!("spectrogram has {} mel bins", self.stft.n_mels),
            });
        }
        if self.paths.gpt2_vocab.is_some() != self.paths.gpt2_merges.is_some() {
            return Err(Error::Config {
                key: "paths.gpt2_merges".into(),
                reason: "gpt2_vocab and gpt2_merges go together".into(),
            });
        }
        if self.decoding.max_len == 0 {
            return Err(Error::Config {
                key: "decoding.max_len".into(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config not representable as TOML: {e}")))
    }

    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_json()?.as_bytes()))
    }

    /// Every key with its default value, for `--help`-style listings.
    pub fn documented_keys() -> Result<Vec<(String, String)>> {
        let value = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut out = Vec::new();
        fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
            match v {
                toml::Value::Table(t) => {
                    for (k, v) in t {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, v, out);
                    }
                }
                other => out.push((prefix.to_string(), other.to_string())),
            }
        }
        walk("", &value, &mut out);
        Ok(out)
    }
}
