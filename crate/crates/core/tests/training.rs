use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use prefixcap::audio::StftConfig;
use prefixcap::dataset::{Collator, Example, Split};
use prefixcap::fixture::{write_synthetic_dataset, CaptionGrammar};
use prefixcap::model::{CaptionModel, Codec, ModelConfig};
use prefixcap::nn::ParamStore;
use prefixcap::train::{HistoryRecord, Profile, TrainConfig, Trainer};

fn config(max_steps: usize) -> TrainConfig {
    TrainConfig {
        profile: Profile::Custom,
        batch_size: Some(4),
        weight_decay: Some(0.01),
        audio_seconds: Some(1.0),
        peak_lr: 1e-3,
        warmup_steps: Some(2),
        max_epochs: 100,
        max_steps: Some(max_steps),
        patience: 100,
        max_text_len: 16,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn model() -> CaptionModel {
    let vocab = CaptionGrammar::vocabulary();
    let store = ParamStore::new(21, DType::F32, Device::Cpu);
    CaptionModel::build(&store, ModelConfig::toy(vocab.len()), Codec::Word(Arc::new(vocab))).unwrap()
}

/// Training and validation examples over the same synthetic corpus.
fn data(dir: &Path, model: &CaptionModel) -> (Vec<Example>, Vec<Example>) {
    let records = write_synthetic_dataset(dir, &[(Split::Train, 10), (Split::Val, 4)], 1.0, 8_000, 3).unwrap();
    let collator = Collator::new(StftConfig::toy(), 1.0, 16, model.text_codec(), dir).unwrap();
    let (train, val): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.split == Split::Train);
    (collator.examples(&train).unwrap(), collator.examples(&val).unwrap())
}

fn params(model: &CaptionModel) -> BTreeMap<String, Vec<f32>> {
    model
        .store
        .tensors()
        .into_iter()
        .map(|(k, t)| (k, t.flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

fn losses(history: &[HistoryRecord]) -> Vec<f64> {
    history.iter().map(|h| h.train_loss).collect()
}

#[test]
fn same_seed_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = || {
        let m = model();
        let (train, val) = data(dir.path(), &m);
        let mut t = Trainer::new(m, config(5), train, val, None, BTreeMap::new()).unwrap();
        let out = t.run().unwrap();
        (losses(&out.history), params(&t.model))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 5);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn resume_mid_epoch_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let steps = 7;

    let m = model();
    let (train, val) = data(dir.path(), &m);
    let mut straight = Trainer::new(m, config(steps), train.clone(), val.clone(), None, BTreeMap::new()).unwrap();
    let full = straight.run().unwrap();

    // 10 examples in batches of 4: step 4 is in the middle of the second epoch
    let ck = dir.path().join("part");
    let mut first = Trainer::new(model(), config(steps), train.clone(), val.clone(), Some(ck.clone()), BTreeMap::new()).unwrap();
    assert_eq!(first.run_steps(4).unwrap(), 4);
    let last = ck.join("last.safetensors");
    first.save_last(&last).unwrap();
    let mut resumed = Trainer::resume(&last, config(steps), train, val, None, BTreeMap::new()).unwrap();
    assert_eq!(resumed.state().step, 4);
    let rest = resumed.run().unwrap();

    let mut joined = losses(first.history());
    joined.extend(losses(&rest.history));
    assert_eq!(joined, losses(&full.history));
    let (a, b) = (params(&straight.model), params(&resumed.model));
    for (name, va) in &a {
        let diff = va.iter().zip(&b[name]).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert_eq!(diff, 0.0, "{name}");
    }
}

#[test]
fn early_stop_follows_validation_history() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let (train, val) = data(dir.path(), &m);
    // a large learning rate makes validation loss stall or rise quickly
    let cfg = TrainConfig {
        peak_lr: 5e-2,
        patience: 2,
        max_steps: None,
        max_epochs: 40,
        ..config(0)
    };
    let mut t = Trainer::new(m, cfg, train, val, None, BTreeMap::new()).unwrap();
    let out = t.run().unwrap();
    let vals: Vec<f64> = out.history.iter().filter_map(|h| h.val_loss).collect();

    let mut best = f64::INFINITY;
    let mut since = 0;
    let mut stop_at = None;
    for (epoch, v) in vals.iter().enumerate() {
        if *v < best {
            best = *v;
            since = 0;
        } else {
            since += 1;
            if since >= 2 {
                stop_at = Some(epoch);
                break;
            }
        }
    }
    match stop_at {
        Some(e) => {
            assert!(out.state.stopped_early);
            assert_eq!(vals.len(), e + 1, "training continued past the stop epoch");
        }
        None => {
            assert!(!out.state.stopped_early);
            assert_eq!(vals.len(), 40);
        }
    }
}

#[test]
fn best_checkpoint_holds_lowest_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let (train, val) = data(dir.path(), &m);
    let out_dir = dir.path().join("run");
    let mut t = Trainer::new(m, config(9), train, val.clone(), Some(out_dir), BTreeMap::new()).unwrap();
    let out = t.run().unwrap();
    let best_val = out.history.iter().filter_map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best_val.is_finite());

    let ck = prefixcap::checkpoint::load_checkpoint(out.best_checkpoint.unwrap(), &Device::Cpu).unwrap();
    let best = CaptionModel::from_checkpoint(&ck, 0, DType::F32, &Device::Cpu).unwrap();
    let reloaded = Trainer::new(best, TrainConfig { calibrate_input: false, ..config(9) }, val.clone(), val, None, BTreeMap::new()).unwrap();
    let again = reloaded.validation_loss().unwrap();
    assert!((again - best_val).abs() < 1e-5, "{again} vs {best_val}");
}

#[test]
fn frozen_decoder_is_bit_identical_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let (train, val) = data(dir.path(), &m);
    let before: BTreeMap<String, Tensor> = m
        .store
        .tensors()
        .into_iter()
        .filter(|(k, _)| k.starts_with("decoder"))
        .map(|(k, t)| (k, t.copy().unwrap()))
        .collect();
    assert!(!before.is_empty());
    let mut t = Trainer::new(m, config(4), train, val, None, BTreeMap::new()).unwrap();
    let out = t.run().unwrap();
    assert!(!out.frozen.frozen.is_empty());
    let after = t.model.store.tensors();
    for (name, b) in before {
        let d = (&after[&name] - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0, "{name}");
    }
}
