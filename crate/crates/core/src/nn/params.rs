use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Parameter groups, the unit of the frozen-parameter contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    MapperTemporal,
    MapperGlobal,
    MapperBypass,
    DecoderEmbedding,
    DecoderTransformer,
    DecoderHeader,
}

impl ParamGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::MapperTemporal => "mapper_temporal",
            ParamGroup::MapperGlobal => "mapper_global",
            ParamGroup::MapperBypass => "mapper_bypass",
            ParamGroup::DecoderEmbedding => "decoder_embedding",
            ParamGroup::DecoderTransformer => "decoder_transformer",
            ParamGroup::DecoderHeader => "decoder_header",
        }
    }

    pub fn is_decoder(&self) -> bool {
        matches!(
            self,
            ParamGroup::DecoderEmbedding | ParamGroup::DecoderTransformer | ParamGroup::DecoderHeader
        )
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub var: Var,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Gaussian with std `sqrt(2 / fan_in)`, for layers followed by ReLU.
    Kaiming,
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, with fan_in taken from
    /// all dimensions after the first.
    FanIn,
}

struct Inner {
    entries: BTreeMap<String, ParamEntry>,
    seed: u64,
    dtype: DType,
    device: Device,
}

/// Named parameters shared by every module of a model.
///
/// Initial values depend only on the store seed and the parameter name, so
/// construction order never changes a model. Frozen parameters are handed to
/// modules as detached tensors: gradients flow through them but are never
/// accumulated for them.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.lock();
        f.debug_struct("ParamStore")
            .field("params", &inner.entries.len())
            .field("dtype", &inner.dtype)
            .finish()
    }
}

/// Parameter values captured at a point in time.
#[derive(Debug, Clone)]
pub struct Snapshot {
    values: BTreeMap<String, (ParamGroup, Tensor)>,
}

impl Snapshot {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name).map(|(_, t)| t)
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: BTreeMap::new(),
                seed,
                dtype,
                device,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.lock().dtype
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    pub fn seed(&self) -> u64 {
        self.lock().seed
    }

    pub fn root(&self, prefix: &str, group: ParamGroup, trainable: bool) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: format!("{prefix}/"),
            group,
            trainable,
        }
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().entries.keys().cloned().collect()
    }

    pub fn entry(&self, name: &str) -> Option<ParamEntry> {
        self.lock().entries.get(name).cloned()
    }

    pub fn entries(&self) -> Vec<(String, ParamEntry)> {
        self.lock().entries.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    pub fn count_elements(&self, filter: impl Fn(&ParamEntry) -> bool) -> usize {
        self.lock()
            .entries
            .values()
            .filter(|e| filter(e))
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&self, prefix: &str) {
        self.lock().entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let inner = self.lock();
        let mut values = BTreeMap::new();
        for (name, e) in &inner.entries {
            values.insert(name.clone(), (e.group, e.var.as_tensor().copy()?.detach()));
        }
        Ok(Snapshot { values })
    }

    /// Maximum absolute change since `snapshot`, per group. Parameters added or
    /// reshaped since the snapshot count as infinitely changed.
    pub fn max_abs_diff(&self, snapshot: &Snapshot) -> Result<BTreeMap<ParamGroup, f64>> {
        let inner = self.lock();
        let mut out: BTreeMap<ParamGroup, f64> = BTreeMap::new();
        for (name, e) in &inner.entries {
            let diff = match snapshot.values.get(name) {
                Some((_, before)) if before.dims() == e.var.dims() => (e.var.as_tensor() - before)?
                    .abs()?
                    .flatten_all()?
                    .max(0)?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?,
                _ => f64::INFINITY,
            };
            let slot = out.entry(e.group).or_insert(0.0);
            *slot = slot.max(diff);
        }
        Ok(out)
    }

    /// All values as detached tensors, keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.lock()
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_detached_tensor()))
            .collect()
    }

    /// Overwrites parameter values from `tensors`. Every tensor must match an
    /// existing parameter's shape; names are reported in `LoadReport`.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>, strict: bool) -> Result<LoadReport> {
        self.assign_under("", tensors, strict)
    }

    /// Like [`assign`](Self::assign) but only for parameters whose name starts
    /// with `prefix`; tensors outside that namespace count as unexpected.
    pub fn assign_under(&self, prefix: &str, tensors: &HashMap<String, Tensor>, strict: bool) -> Result<LoadReport> {
        let inner = self.lock();
        let mut report = LoadReport::default();
        for (name, entry) in inner.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            match tensors.get(name) {
                Some(t) => {
                    if t.dims() != entry.var.dims() {
                        return Err(Error::CheckpointMismatch {
                            tensor: name.clone(),
                            reason: format!("shape {:?}, expected {:?}", t.dims(), entry.var.dims()),
                        });
                    }
                    entry.var.set(&t.to_dtype(inner.dtype)?.to_device(&inner.device)?)?;
                    report.loaded.push(name.clone());
                }
                None => report.missing.push(name.clone()),
            }
        }
        let mut unexpected: Vec<String> = tensors
            .keys()
            .filter(|k| !k.starts_with(prefix) || !inner.entries.contains_key(*k))
            .cloned()
            .collect();
        unexpected.sort();
        report.unexpected = unexpected;
        if strict {
            if let Some(name) = report.missing.first() {
                return Err(Error::CheckpointMismatch {
                    tensor: name.clone(),
                    reason: "missing from checkpoint".into(),
                });
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: &BTreeMap<String, String>) -> Result<()> {
        crate::checkpoint::save_tensors(path, &self.tensors(), metadata)
    }
}

/// Outcome of loading values into a store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Store parameters absent from the source.
    pub missing: Vec<String>,
    /// Source tensors with no matching parameter.
    pub unexpected: Vec<String>,
}

/// Scoped view of a store used while constructing modules.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
    group: ParamGroup,
    trainable: bool,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        Self {
            prefix: format!("{}{}.", self.prefix, name),
            ..self.clone()
        }
    }

    pub fn with_group(&self, group: ParamGroup, trainable: bool) -> Self {
        Self {
            group,
            trainable,
            ..self.clone()
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    /// Creates (or fetches) a parameter and returns the tensor modules should
    /// hold: tracked when trainable, detached when frozen.
    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let entry = self.get_entry(shape.into(), name, init, self.trainable)?;
        Ok(Self::handle(&entry))
    }

    /// Non-trainable state such as normalization statistics.
    pub fn buffer(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let entry = self.get_entry(shape.into(), name, init, false)?;
        Ok(Self::handle(&entry))
    }

    /// Creates or replaces a parameter with the given value.
    pub fn insert(&self, name: &str, value: &Tensor) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.store.lock();
        let value = value.to_dtype(inner.dtype)?.to_device(&inner.device)?;
        let entry = ParamEntry {
            var: Var::from_tensor(&value)?,
            group: self.group,
            trainable: self.trainable,
        };
        inner.entries.insert(full, entry.clone());
        Ok(Self::handle(&entry))
    }

    fn handle(entry: &ParamEntry) -> Tensor {
        if entry.trainable {
            entry.var.as_tensor().clone()
        } else {
            entry.var.as_detached_tensor()
        }
    }

    fn get_entry(&self, shape: Shape, name: &str, init: Init, trainable: bool) -> Result<ParamEntry> {
        let full = self.full_name(name);
        let mut inner = self.store.lock();
        if let Some(e) = inner.entries.get(&full) {
            if e.var.shape() != &shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter `{full}` exists with shape {:?}, requested {:?}",
                    e.var.dims(),
                    shape.dims()
                )));
            }
            return Ok(e.clone());
        }
        let values = init_values(&shape, init, inner.seed, &full);
        let tensor = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let entry = ParamEntry {
            var: Var::from_tensor(&tensor)?,
            group: self.group,
            trainable,
        };
        inner.entries.insert(full, entry.clone());
        Ok(entry)
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the store seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn init_values(shape: &Shape, init: Init, seed: u64, name: &str) -> Vec<f32> {
    let n = shape.elem_count();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal { std } => {
            let dist = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        }
        Init::Kaiming => {
            let fan_in: usize = shape.dims().iter().skip(1).product::<usize>().max(1);
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        }
        Init::FanIn => {
            let fan_in: usize = shape.dims().iter().skip(1).product::<usize>().max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        }
    }
}
