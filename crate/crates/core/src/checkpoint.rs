//! Named-tensor archives (safetensors) with string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Metadata key holding the model configuration as JSON.
pub const META_CONFIG: &str = "config";
pub const META_CONFIG_HASH: &str = "config_hash";
pub const META_VOCAB: &str = "vocab";
pub const META_KIND: &str = "kind";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: HashMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata.get(key).map(String::as_str).ok_or_else(|| Error::CheckpointMismatch {
            tensor: format!("<metadata:{key}>"),
            reason: "missing metadata entry".into(),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::CheckpointMismatch {
            tensor: name.to_string(),
            reason: "missing from checkpoint".into(),
        })
    }
}

/// Writes `tensors` atomically: data goes to a sibling temp file that is then
/// renamed over `path`.
/// Lowercase hex SHA-256, used for config and artifact fingerprints.
pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_tensors(
    path: impl AsRef<Path>,
    tensors: &BTreeMap<String, Tensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let contiguous = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    safetensors::serialize_to_file(contiguous, Some(meta), &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&data)?;
    let metadata = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let tensors = candle_core::safetensors::load_buffer(&data, device)?;
    Ok(Checkpoint { tensors, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.safetensors");
        let t = Tensor::new(&[[1.5f32, -0.0], [f32::MIN_POSITIVE, 3.25]], &Device::Cpu).unwrap();
        let tensors = BTreeMap::from([("a/w".to_string(), t.clone())]);
        let meta = BTreeMap::from([("step".to_string(), "12".to_string())]);
        save_tensors(&path, &tensors, &meta).unwrap();
        let ck = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(ck.meta("step").unwrap(), "12");
        let back = ck.tensor("a/w").unwrap();
        let bits = |t: &Tensor| -> Vec<u32> {
            t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(back), bits(&t));
        assert!(matches!(ck.tensor("nope"), Err(Error::CheckpointMismatch { .. })));
        assert!(std::fs::read_dir(path.parent().unwrap()).unwrap().count() == 1);
    }
}
