use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One audio clip with its reference captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub audio_id: String,
    #[serde(rename = "audio")]
    pub audio_path: PathBuf,
    pub captions: Vec<String>,
    pub split: Split,
}

impl CaptionRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.audio_id.trim().is_empty() {
            return Err("audio_id is empty".into());
        }
        if self.captions.is_empty() {
            return Err("captions array is empty".into());
        }
        if let Some(i) = self.captions.iter().position(|c| c.split_whitespace().next().is_none()) {
            return Err(format!("caption {i} is empty"));
        }
        Ok(())
    }

    /// Audio path, resolved against `base` when relative.
    pub fn resolved_audio(&self, base: &Path) -> PathBuf {
        if self.audio_path.is_absolute() {
            self.audio_path.clone()
        } else {
            base.join(&self.audio_path)
        }
    }
}

/// Reads a JSON-lines manifest. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::ManifestMissing(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<CaptionRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedManifest {
            path: origin.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let record: CaptionRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        record.validate().map_err(malformed)?;
        if !seen.insert(record.audio_id.clone()) {
            return Err(Error::DuplicateAudioId(record.audio_id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Canonical form: one compact JSON object per line, fields in declaration order.
pub fn write_manifest(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn filter_split(records: &[CaptionRecord], split: Split) -> Vec<CaptionRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

/// One (record, caption) pair per caption, in record order.
pub fn expand_pairs(records: &[CaptionRecord]) -> Vec<(&CaptionRecord, &str)> {
    records
        .iter()
        .flat_map(|r| r.captions.iter().map(move |c| (r, c.as_str())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = r#"{"audio_id":"a","audio":"a.wav","captions":["a dog barks"],"split":"train"}
{"audio_id":"b","audio":"b.wav","captions":["rain falls","thunder"],"split":"val"}
{"audio_id":"c","audio":"c.wav","captions":["a car passes"],"split":"test"}
"#;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_records_in_order() {
        let (_d, path) = write(THREE);
        let recs = load_manifest(&path).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.audio_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(recs[1].captions.len(), 2);
        assert_eq!(recs[2].split, Split::Test);
    }

    #[test]
    fn empty_captions_on_line_two() {
        let text = THREE.replace(r#"["rain falls","thunder"]"#, "[]");
        let (_d, path) = write(&text);
        match load_manifest(&path) {
            Err(Error::MalformedManifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn whitespace_only_caption_is_malformed() {
        let text = THREE.replace(r#""a car passes""#, r#""   ""#);
        let (_d, path) = write(&text);
        assert!(matches!(load_manifest(&path), Err(Error::MalformedManifest { line: 3, .. })));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = THREE.replace(r#""audio_id":"c""#, r#""audio_id":"a""#);
        let (_d, path) = write(&text);
        assert!(matches!(load_manifest(&path), Err(Error::DuplicateAudioId(id)) if id == "a"));
    }

    #[test]
    fn missing_file_and_bad_json() {
        assert!(matches!(load_manifest("/no/such/manifest.jsonl"), Err(Error::ManifestMissing(_))));
        let (_d, path) = write("{not json}\n");
        assert!(matches!(load_manifest(&path), Err(Error::MalformedManifest { line: 1, .. })));
        let (_d, path) = write(r#"{"audio_id":"a","audio":"a.wav","captions":["x"],"split":"dev"}"#);
        assert!(matches!(load_manifest(&path), Err(Error::MalformedManifest { line: 1, .. })));
    }

    #[test]
    fn split_filtering_counts() {
        let text = format!(
            "{}{}",
            THREE,
            r#"{"audio_id":"d","audio":"d.wav","captions":["birds chirp"],"split":"train"}"#
        );
        let (_d, path) = write(&text);
        let recs = load_manifest(&path).unwrap();
        assert_eq!(filter_split(&recs, Split::Train).len(), 2);
        assert_eq!(filter_split(&recs, Split::Val).len(), 1);
        assert_eq!(filter_split(&recs, Split::Test).len(), 1);
    }

    #[test]
    fn canonical_manifest_round_trips_byte_for_byte() {
        let (dir, path) = write(THREE);
        let recs = load_manifest(&path).unwrap();
        let out = dir.path().join("out.jsonl");
        write_manifest(&out, &recs).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), THREE.as_bytes());
    }

    #[test]
    fn expansion_yields_one_pair_per_caption() {
        let recs = parse_manifest(THREE, Path::new("m")).unwrap();
        let pairs = expand_pairs(&recs);
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs[2].0.audio_id, "b");
        assert_eq!(pairs[2].1, "thunder");
    }
}
