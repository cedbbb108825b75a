//! Training loop: AdamW over the trainable parameters, warmup-then-decay
//! learning rate, per-epoch validation with early stopping, resumable
//! checkpoints and a JSON-lines history.

mod optim;
mod setup;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{lr_at, AdamW, AdamWConfig, Schedule};
pub use setup::{plan_plain, plan_setup, Setup, SetupPlan};

use crate::checkpoint::{load_checkpoint, save_tensors};
use crate::dataset::{Batch, Example};
use crate::decoder::{verify_frozen, FrozenReport};
use crate::encoder::{mel_statistics, AudioEncoder};
use crate::model::CaptionModel;
use crate::nn::Snapshot;
use crate::{Error, Result};

pub const META_TRAIN_STATE: &str = "train_state";
pub const META_STEP: &str = "step";
pub const META_SEED: &str = "seed";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const HISTORY_FILE: &str = "history.jsonl";

/// Dataset-specific defaults for batch size, weight decay and clip length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Clotho,
    Audiocaps,
    /// Union of datasets: longest clip length, Clotho batch and decay.
    Merged,
    /// No dataset defaults; batch size, weight decay and clip length must be set.
    Custom,
}

impl Profile {
    /// (batch size, weight decay, clip seconds)
    pub fn defaults(&self) -> Option<(usize, f64, f64)> {
        match self {
            Profile::Clotho | Profile::Merged => Some((55, 0.02, 30.0)),
            Profile::Audiocaps => Some((75, 0.01, 10.0)),
            Profile::Custom => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub profile: Profile,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub audio_seconds: Option<f64>,
    pub peak_lr: f64,
    /// Explicit warmup length; otherwise `warmup_fraction` of all steps.
    pub warmup_steps: Option<usize>,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps (also shortens the schedule).
    pub max_steps: Option<usize>,
    pub patience: usize,
    pub seed: u64,
    pub header_tuning: bool,
    /// Minimum word count for the header-tuning vocabulary.
    pub min_word_freq: usize,
    /// Token budget per caption, BOS and EOS included.
    pub max_text_len: usize,
    pub grad_clip: Option<f64>,
    /// Set the encoder's input normalization from the training
    /// spectrograms. Turn off when the encoder comes pretrained.
    pub calibrate_input: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Clotho,
            batch_size: None,
            weight_decay: None,
            audio_seconds: None,
            peak_lr: 5e-5,
            warmup_steps: None,
            warmup_fraction: 0.05,
            schedule: Schedule::Linear,
            max_epochs: 50,
            max_steps: None,
            patience: 5,
            seed: 0,
            header_tuning: false,
            min_word_freq: 1,
            max_text_len: 32,
            grad_clip: Some(1.0),
            calibrate_input: true,
        }
    }
}

impl TrainConfig {
    fn resolved<T>(&self, explicit: Option<T>, pick: impl Fn((usize, f64, f64)) -> T, key: &str) -> Result<T> {
        explicit
            .or_else(|| self.profile.defaults().map(pick))
            .ok_or_else(|| Error::Config {
                key: format!("train.{key}"),
                reason: "required with the custom profile".into(),
            })
    }

    pub fn batch_size(&self) -> Result<usize> {
        self.resolved(self.batch_size, |d| d.0, "batch_size")
    }

    pub fn weight_decay(&self) -> Result<f64> {
        self.resolved(self.weight_decay, |d| d.1, "weight_decay")
    }

    pub fn audio_seconds(&self) -> Result<f64> {
        self.resolved(self.audio_seconds, |d| d.2, "audio_seconds")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Error::Config {
            key: format!("train.{key}"),
            reason: reason.into(),
        };
        if self.batch_size()? == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(bad("patience", "must be at least 1"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(bad("peak_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(bad("warmup_fraction", "must be in [0, 1)"));
        }
        if self.max_epochs == 0 {
            return Err(bad("max_epochs", "must be at least 1"));
        }
        if self.max_text_len < 2 {
            return Err(bad("max_text_len", "must be at least 2"));
        }
        if self.weight_decay()? < 0.0 {
            return Err(bad("weight_decay", "must be non-negative"));
        }
        if self.audio_seconds()? <= 0.0 {
            return Err(bad("audio_seconds", "must be positive"));
        }
        Ok(())
    }
}

/// Validation-loss early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub epochs_since_improvement: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            epochs_since_improvement: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.epochs_since_improvement = 0;
            StopDecision::Improved
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub early_stopping: EarlyStopping,
    pub stopped_early: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    /// Present on the last step of each epoch when validation data exists.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRecord>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub frozen: FrozenReport,
    pub state: TrainState,
}

pub struct Trainer {
    pub model: CaptionModel,
    config: TrainConfig,
    optimizer: AdamW,
    state: TrainState,
    train: Vec<Example>,
    val: Vec<Example>,
    out_dir: Option<PathBuf>,
    metadata: BTreeMap<String, String>,
    snapshot: Snapshot,
    history: Vec<HistoryRecord>,
    total_steps: usize,
    warmup: usize,
    batch_size: usize,
}

impl Trainer {
    /// `out_dir`, when given, receives `last`/`best` checkpoints and the
    /// history file; `metadata` is embedded in every checkpoint.
    pub fn new(
        model: CaptionModel,
        config: TrainConfig,
        train: Vec<Example>,
        val: Vec<Example>,
        out_dir: Option<PathBuf>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if config.calibrate_input {
            if let Some((mean, var)) = mel_statistics(train.iter().map(|e| e.spectrogram.as_ref())) {
                AudioEncoder::set_input_statistics(&model.store, &mean, &var)?;
            }
        }
        let batch_size = config.batch_size()?;
        let steps_per_epoch = train.len().div_ceil(batch_size);
        let mut total_steps = steps_per_epoch * config.max_epochs;
        if let Some(cap) = config.max_steps {
            total_steps = total_steps.min(cap);
        }
        let warmup = config
            .warmup_steps
            .unwrap_or_else(|| (config.warmup_fraction * total_steps as f64).round() as usize)
            .min(total_steps);
        let optimizer = AdamW::new(
            model.store.trainable(),
            AdamWConfig {
                weight_decay: config.weight_decay()?,
                ..AdamWConfig::default()
            },
        )?;
        let snapshot = model.store.snapshot()?;
        if let Some(dir) = &out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            state: TrainState {
                step: 0,
                epoch: 0,
                batch_in_epoch: 0,
                early_stopping: EarlyStopping::new(config.patience),
                stopped_early: false,
                seed: config.seed,
            },
            model,
            config,
            optimizer,
            train,
            val,
            out_dir,
            metadata,
            snapshot,
            history: Vec::new(),
            total_steps,
            warmup,
            batch_size,
        })
    }

    /// Continues from a `last` checkpoint written by [`save_last`](Self::save_last).
    pub fn resume(
        path: impl AsRef<Path>,
        config: TrainConfig,
        train: Vec<Example>,
        val: Vec<Example>,
        out_dir: Option<PathBuf>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let ck = load_checkpoint(path, &Device::Cpu)?;
        let model = CaptionModel::from_checkpoint(&ck, config.seed, DType::F32, &Device::Cpu)?;
        let state: TrainState = serde_json::from_str(ck.meta(META_TRAIN_STATE)?)?;
        // the checkpoint already holds the calibrated statistics
        let config = TrainConfig {
            calibrate_input: false,
            ..config
        };
        let mut trainer = Self::new(model, config, train, val, out_dir, metadata)?;
        trainer.optimizer.load_state(&ck.tensors, state.step)?;
        trainer.state = state;
        Ok(trainer)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn history(&self) -> &[HistoryRecord] {
        &self.history
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.batch_size)
    }

    pub fn finished(&self) -> bool {
        self.state.stopped_early || self.state.step >= self.total_steps || self.state.epoch >= self.config.max_epochs
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order
    }

    fn batch(&self, examples: &[Example]) -> Result<Batch> {
        let codec = self.model.text_codec();
        Batch::from_examples(examples, self.config.max_text_len, codec.pad_id(), codec.eos_id(), true)
    }

    /// One optimizer step; `None` once training is over.
    pub fn step(&mut self) -> Result<Option<HistoryRecord>> {
        if self.finished() {
            return Ok(None);
        }
        let order = self.epoch_order(self.state.epoch);
        let start = self.state.batch_in_epoch * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        let examples: Vec<Example> = order[start..end].iter().map(|&i| self.train[i].clone()).collect();
        let batch = self.batch(&examples)?;
        let loss = self.model.loss(&batch)?;
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.state.step });
        }
        let grads = loss.backward()?;
        let lr = lr_at(self.state.step, self.warmup, self.total_steps, self.config.peak_lr, self.config.schedule);
        let grad_norm = self
            .optimizer
            .step(&grads, lr, self.config.grad_clip)
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step: self.state.step },
                other => other,
            })?;
        self.state.step += 1;
        self.state.batch_in_epoch += 1;
        let mut record = HistoryRecord {
            step: self.state.step,
            epoch: self.state.epoch,
            lr,
            train_loss: loss_value,
            grad_norm,
            val_loss: None,
        };
        if self.state.batch_in_epoch == self.steps_per_epoch() {
            record.val_loss = self.end_epoch()?;
        }
        self.append_history(&record)?;
        self.history.push(record.clone());
        Ok(Some(record))
    }

    fn end_epoch(&mut self) -> Result<Option<f64>> {
        self.state.epoch += 1;
        self.state.batch_in_epoch = 0;
        if self.val.is_empty() {
            return Ok(None);
        }
        let val = self.validation_loss()?;
        match self.state.early_stopping.observe(val) {
            StopDecision::Improved => {
                if let Some(dir) = &self.out_dir {
                    self.save_best(dir.join(BEST_CHECKPOINT))?;
                }
            }
            StopDecision::Continue => {}
            StopDecision::Stop => self.state.stopped_early = true,
        }
        Ok(Some(val))
    }

    /// Token-weighted mean loss over the validation examples.
    pub fn validation_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0.0;
        for chunk in self.val.chunks(self.batch_size) {
            let batch = self.batch(chunk)?;
            let n: f64 = (0..batch.size())
                .map(|i| batch.mask_row(i)[1..].iter().filter(|&&m| m).count() as f64)
                .sum();
            let loss = self.model.loss(&batch)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            total += loss * n;
            tokens += n;
        }
        Ok(if tokens > 0.0 { total / tokens } else { 0.0 })
    }

    fn append_history(&self, record: &HistoryRecord) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let path = dir.join(HISTORY_FILE);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(&path, e))
    }

    fn checkpoint_metadata(&self) -> Result<BTreeMap<String, String>> {
        let mut meta = self.model.metadata()?;
        meta.extend(self.metadata.clone());
        meta.insert(META_STEP.into(), self.state.step.to_string());
        meta.insert(META_SEED.into(), self.state.seed.to_string());
        Ok(meta)
    }

    /// Parameters, optimizer moments and loop state.
    pub fn save_last(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = self.model.store.tensors();
        tensors.extend(self.optimizer.state_tensors());
        let mut meta = self.checkpoint_metadata()?;
        meta.insert(META_TRAIN_STATE.into(), serde_json::to_string(&self.state)?);
        save_tensors(path, &tensors, &meta)
    }

    pub fn save_best(&self, path: impl AsRef<Path>) -> Result<()> {
        save_tensors(path, &self.model.store.tensors(), &self.checkpoint_metadata()?)
    }

    /// Runs to completion (or early stop), then checks that no frozen
    /// parameter moved.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        while let Some(record) = self.step()? {
            log::debug!(
                "step {} epoch {} lr {:.3e} loss {:.4}",
                record.step,
                record.epoch,
                record.lr,
                record.train_loss
            );
            if let Some(v) = record.val_loss {
                log::info!("epoch {} done: train {:.4} val {:.4}", record.epoch, record.train_loss, v);
            }
        }
        self.finish()
    }

    /// Runs at most `n` more steps without finalizing.
    pub fn run_steps(&mut self, n: usize) -> Result<usize> {
        let mut done = 0;
        while done < n && self.step()?.is_some() {
            done += 1;
        }
        Ok(done)
    }

    pub fn finish(&mut self) -> Result<TrainOutcome> {
        let frozen = verify_frozen(&self.model.store, &self.snapshot)?;
        let mut last = None;
        let mut best = None;
        if let Some(dir) = &self.out_dir {
            let path = dir.join(LAST_CHECKPOINT);
            self.save_last(&path)?;
            last = Some(path);
            let best_path = dir.join(BEST_CHECKPOINT);
            if !best_path.exists() {
                // no validation data: the final parameters are the best we have
                self.save_best(&best_path)?;
            }
            best = Some(best_path);
        }
        Ok(TrainOutcome {
            history: self.history.clone(),
            best_checkpoint: best,
            last_checkpoint: last,
            frozen,
            state: self.state.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_after_patience_non_improving_epochs() {
        let mut es = EarlyStopping::new(3);
        assert_eq!(es.observe(1.0), StopDecision::Improved);
        assert_eq!(es.observe(1.0), StopDecision::Continue);
        assert_eq!(es.observe(1.5), StopDecision::Continue);
        assert_eq!(es.observe(1.2), StopDecision::Stop);
        let mut es = EarlyStopping::new(3);
        es.observe(1.0);
        es.observe(1.1);
        assert_eq!(es.observe(0.9), StopDecision::Improved);
        assert_eq!(es.epochs_since_improvement, 0);
    }

    #[test]
    fn profiles() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size().unwrap(), 55);
        assert_eq!(c.weight_decay().unwrap(), 0.02);
        assert_eq!(c.audio_seconds().unwrap(), 30.0);
        let a = TrainConfig {
            profile: Profile::Audiocaps,
            ..Default::default()
        };
        assert_eq!((a.batch_size().unwrap(), a.weight_decay().unwrap(), a.audio_seconds().unwrap()), (75, 0.01, 10.0));
        let custom = TrainConfig {
            profile: Profile::Custom,
            ..Default::default()
        };
        assert!(matches!(custom.batch_size(), Err(Error::Config { key, .. }) if key == "train.batch_size"));
        let zero = TrainConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }
}
