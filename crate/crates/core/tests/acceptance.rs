//! Acceptance checks for the toy-scale pipeline. Runs as a plain binary and
//! prints one PASS/FAIL line per check; exits non-zero if any check fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use prefixcap::audio::{log_mel, StftConfig, Waveform};
use prefixcap::config::RunConfig;
use prefixcap::dataset::{CaptionRecord, Collator, Normalization, Split};
use prefixcap::decoder::Decoding;
use prefixcap::encoder::{AudioEncoder, EncoderConfig};
use prefixcap::eval::{evaluate, spider, GoldQuery, Metric, RetrievalIndex, TfIdfEmbedder};
use prefixcap::eval::{recall_at_k, Embedder};
use prefixcap::fixture::{synth_audio, write_synthetic_dataset, CaptionGrammar};
use prefixcap::mapper::MapperConfig;
use prefixcap::model::{CaptionModel, Codec, ModelConfig};
use prefixcap::nn::{ParamGroup, ParamStore};
use prefixcap::pipeline::train_run;
use prefixcap::train::{Profile, TrainConfig, Trainer};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn toy_train_config(max_steps: usize) -> TrainConfig {
    TrainConfig {
        profile: Profile::Custom,
        batch_size: Some(8),
        weight_decay: Some(0.0),
        audio_seconds: Some(1.0),
        peak_lr: 1e-3,
        warmup_steps: Some(20),
        max_epochs: 10_000,
        max_steps: Some(max_steps),
        patience: 10_000,
        max_text_len: 16,
        ..TrainConfig::default()
    }
}

/// Toy model around a randomly initialized fixture-sized decoder.
fn random_toy_model(seed: u64, header_tuning: bool, dtype: DType) -> prefixcap::Result<CaptionModel> {
    let vocab = CaptionGrammar::vocabulary();
    let store = ParamStore::new(seed, dtype, Device::Cpu);
    let cfg = ModelConfig {
        header_tuning,
        ..ModelConfig::toy(vocab.len())
    };
    CaptionModel::build(&store, cfg, Codec::Word(Arc::new(vocab)))
}

fn toy_data(dir: &Path, n: usize, seed: u64) -> prefixcap::Result<Vec<CaptionRecord>> {
    write_synthetic_dataset(dir, &[(Split::Train, n)], 1.0, 8_000, seed)
}

fn collator(model: &CaptionModel, dir: &Path) -> prefixcap::Result<Collator> {
    Collator::new(StftConfig::toy(), 1.0, 16, model.text_codec(), dir)
}

fn decoder_diffs(model: &CaptionModel, before: &BTreeMap<String, Tensor>) -> prefixcap::Result<BTreeMap<ParamGroup, f64>> {
    let after = model.store.tensors();
    let mut out = BTreeMap::new();
    for (name, entry) in model.store.entries() {
        let d = (after[&name].to_dtype(DType::F64)? - before[&name].to_dtype(DType::F64)?)?
            .abs()?
            .flatten_all()?
            .max(0)?
            .to_scalar::<f64>()?;
        let slot = out.entry(entry.group).or_insert(0.0f64);
        *slot = slot.max(d);
    }
    Ok(out)
}

fn frozen_decoder(work: &Path) -> Check {
    let start = Instant::now();
    let dir = work.join("frozen");
    let records = toy_data(&dir, 16, 11).map_err(fail)?;
    let mut details = Vec::new();
    for header_tuning in [false, true] {
        let model = random_toy_model(3, header_tuning, DType::F32).map_err(fail)?;
        let examples = collator(&model, &dir).and_then(|c| c.examples(&records)).map_err(fail)?;
        let before: BTreeMap<String, Tensor> = model.store.tensors().into_iter().map(|(k, t)| Ok((k, t.copy()?))).collect::<candle_core::Result<_>>().map_err(fail)?;
        let mut trainer = Trainer::new(model, toy_train_config(100), examples, vec![], None, BTreeMap::new()).map_err(fail)?;
        let steps = trainer.run_steps(100).map_err(fail)?;
        trainer.finish().map_err(fail)?;
        let diffs = decoder_diffs(&trainer.model, &before).map_err(fail)?;
        let decoder_max = |g: ParamGroup| diffs.get(&g).copied().unwrap_or(0.0);
        let body = decoder_max(ParamGroup::DecoderEmbedding).max(decoder_max(ParamGroup::DecoderTransformer));
        let header = decoder_max(ParamGroup::DecoderHeader);
        let trained = diffs[&ParamGroup::Encoder] > 0.0 && diffs[&ParamGroup::MapperTemporal] > 0.0;
        if steps < 100 || body != 0.0 || !trained {
            return Err(format!("header_tuning={header_tuning}: {steps} steps, decoder body diff {body:e}, trained={trained}"));
        }
        if header_tuning && header <= 0.0 {
            return Err("header tuning left the header unchanged".into());
        }
        if !header_tuning && header != 0.0 {
            return Err(format!("frozen header moved by {header:e}"));
        }
        details.push(format!("ht={header_tuning}: body diff {body}, header diff {header:.2e}"));
    }
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(120),
        format!("2x100 steps; {}; {:.1}s", details.join("; "), elapsed.as_secs_f64()),
    )
}

fn gradients(work: &Path) -> Check {
    let dir = work.join("grad");
    let records = toy_data(&dir, 4, 5).map_err(fail)?;
    let model = random_toy_model(9, false, DType::F32).map_err(fail)?;
    let coll = collator(&model, &dir).map_err(fail)?;
    let pairs: Vec<(&CaptionRecord, &str)> = records.iter().map(|r| (r, r.captions[0].as_str())).collect();
    let batch = coll.collate(&pairs).map_err(fail)?;

    // gradient norms per group
    let loss = model.loss(&batch).map_err(fail)?;
    let grads = loss.backward().map_err(fail)?;
    let mut sq: BTreeMap<ParamGroup, f64> = BTreeMap::new();
    for (_, e) in model.store.entries() {
        if let Some(g) = grads.get(e.var.as_tensor()) {
            let s = g.to_dtype(DType::F64).and_then(|g| g.sqr()?.sum_all()?.to_scalar::<f64>()).map_err(fail)?;
            *sq.entry(e.group).or_default() += s;
        }
    }
    let norm = |g: ParamGroup| sq.get(&g).copied().unwrap_or(0.0).sqrt();
    let (enc, map_t, map_g) = (norm(ParamGroup::Encoder), norm(ParamGroup::MapperTemporal), norm(ParamGroup::MapperGlobal));
    if !(enc > 0.0 && map_t > 0.0 && map_g > 0.0) {
        return Err(format!("gradient norms encoder {enc:e}, mapper_t {map_t:e}, mapper_g {map_g:e}"));
    }

    // finite differences on one mapper weight, in double precision
    let model = model.with_dtype(DType::F64).map_err(fail)?;
    let (name, entry) = model
        .store
        .entries()
        .into_iter()
        .find(|(n, e)| e.group == ParamGroup::MapperTemporal && n.ends_with("weight") && e.var.elem_count() > 1)
        .ok_or("no mapper weight")?;
    let grads = model.loss(&batch).and_then(|l| Ok(l.backward()?)).map_err(fail)?;
    let analytic_all: Vec<f64> = grads
        .get(entry.var.as_tensor())
        .ok_or("mapper weight has no gradient")?
        .flatten_all()
        .and_then(|t| t.to_vec1::<f64>())
        .map_err(fail)?;
    let (idx, analytic) = analytic_all
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .ok_or("empty gradient")?;
    let original = entry.var.as_tensor().copy().map_err(fail)?;
    let shape = original.shape().clone();
    let values: Vec<f64> = original.flatten_all().and_then(|t| t.to_vec1()).map_err(fail)?;
    let eps = 1e-6;
    let loss_at = |delta: f64| -> std::result::Result<f64, String> {
        let mut v = values.clone();
        v[idx] += delta;
        let t = Tensor::from_vec(v, shape.clone(), &Device::Cpu).map_err(fail)?;
        entry.var.set(&t).map_err(fail)?;
        model.loss(&batch).and_then(|l| Ok(l.to_scalar::<f64>()?)).map_err(fail)
    };
    let numeric = (loss_at(eps)? - loss_at(-eps)?) / (2.0 * eps);
    entry.var.set(&original).map_err(fail)?;
    let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-12);
    ensure(
        rel < 1e-3,
        format!(
            "|g| encoder {enc:.3e}, mapper_t {map_t:.3e}, mapper_g {map_g:.3e}; {name}[{idx}] analytic {analytic:.6e} numeric {numeric:.6e} rel {rel:.1e}"
        ),
    )
}

fn duration_invariance() -> Check {
    let model = random_toy_model(1, false, DType::F32).map_err(fail)?;
    let caption = &CaptionGrammar::distinct(1, 2)[0];
    let mut shapes = Vec::new();
    for secs in [4.0, 10.0] {
        let wave = synth_audio(caption, secs, 8_000, 1).map_err(fail)?;
        let mel = log_mel(&wave, &StftConfig::toy()).map_err(fail)?;
        let prefix = model.prefixes_for(&[&mel]).map_err(fail)?;
        shapes.push((mel.frames, prefix.0.dims().to_vec()));
    }
    let cfg = &model.config.mapper;
    let expect = vec![1, cfg.n_temporal + cfg.n_global, cfg.d_model];
    ensure(
        shapes[0].1 == expect && shapes[1].1 == expect,
        format!("4 s ({} frames) -> {:?}, 10 s ({} frames) -> {:?}", shapes[0].0, shapes[0].1, shapes[1].0, shapes[1].1),
    )
}

fn shapes() -> Check {
    let stft = StftConfig::default();
    let mut frames = Vec::new();
    for secs in [30.0, 10.0] {
        let wave = Waveform::new(
            (0..(secs * stft.sample_rate as f64) as usize).map(|i| ((i as f32) * 0.01).sin() * 0.1).collect(),
            stft.sample_rate,
        )
        .map_err(fail)?;
        frames.push(log_mel(&wave, &stft).map_err(fail)?.shape());
    }
    if frames != vec![(1500, 64), (500, 64)] {
        return Err(format!("spectrogram shapes {frames:?}"));
    }
    let start = Instant::now();
    let store = ParamStore::new(0, DType::F32, Device::Cpu);
    let encoder = AudioEncoder::new(&store, EncoderConfig::full()).map_err(fail)?;
    let x = Tensor::randn(0f32, 1f32, (1, 1, 1500, 64), &Device::Cpu).map_err(fail)?;
    let (f_t, f_g) = encoder.encode(&x).map_err(fail)?;
    ensure(
        f_t.0.dims() == [1, 23, 2, 2048] && f_g.0.dims() == [1, 2048],
        format!(
            "30 s -> {:?}, 10 s -> {:?}; full encoder 1500x64 -> f_t {:?}, f_g {:?} ({:.1}s)",
            frames[0],
            frames[1],
            &f_t.0.dims()[1..],
            &f_g.0.dims()[1..],
            start.elapsed().as_secs_f64()
        ),
    )
}

fn memorization(work: &Path, decoder: &Path) -> Check {
    let dir = work.join("memo");
    let records = toy_data(&dir, 8, 1).map_err(fail)?;
    let start = Instant::now();
    let vocab_len = CaptionGrammar::vocabulary().len();
    let store = ParamStore::new(0, DType::F32, Device::Cpu);
    let model = CaptionModel::with_pretrained_decoder(&store, ModelConfig::toy(vocab_len), decoder, None, None).map_err(fail)?;
    let examples = collator(&model, &dir).and_then(|c| c.examples(&records)).map_err(fail)?;
    let mut trainer = Trainer::new(model, toy_train_config(500), examples.clone(), vec![], None, BTreeMap::new()).map_err(fail)?;
    let mut reached = None;
    while let Some(rec) = trainer.step().map_err(fail)? {
        if rec.train_loss < 0.1 {
            reached = Some((rec.step, rec.train_loss));
            break;
        }
    }
    let specs: Vec<_> = examples.iter().map(|e| e.spectrogram.as_ref()).collect();
    let captions = trainer.model.caption(&specs, &Decoding::default()).map_err(fail)?;
    let exact = captions.iter().zip(&records).filter(|(c, r)| **c == r.captions[0]).count();
    let elapsed = start.elapsed();
    let detail = match reached {
        Some((step, loss)) => format!("loss {loss:.4} at step {step}"),
        None => "loss never below 0.1 in 500 steps".into(),
    };
    ensure(
        reached.is_some() && exact >= 7 && elapsed < Duration::from_secs(600),
        format!("{detail}; greedy exact {exact}/8; {:.1}s", elapsed.as_secs_f64()),
    )
}

fn metric_oracles() -> Check {
    let samples = common::metric_samples(20, 2024);
    let report = evaluate(&common::to_corpus(&samples), &Metric::ALL, None, Normalization::default()).map_err(fail)?;
    let mut worst: f64 = 0.0;
    let mut compare = |name: &str, got: f64, want: f64| -> std::result::Result<(), String> {
        let d = (got - want).abs();
        worst = worst.max(d);
        if d > 1e-6 {
            Err(format!("{name}: library {got} vs oracle {want}"))
        } else {
            Ok(())
        }
    };
    for n in 1..=4 {
        compare(&format!("bleu_{n}"), report.scores[&format!("bleu_{n}")], common::bleu(&samples, n))?;
    }
    let cider = common::cider(&samples);
    for (i, s) in samples.iter().enumerate() {
        compare(&format!("rouge_l[{}]", s.id), report.per_sample["rouge_l"][&s.id], common::rouge_l(s))?;
        compare(&format!("meteor_lite[{}]", s.id), report.per_sample["meteor_lite"][&s.id], common::meteor(s))?;
        compare(&format!("cider[{}]", s.id), report.per_sample["cider"][&s.id], cider[i])?;
    }
    let sp = spider(0.733, 0.177);
    compare("spider", sp, 0.455)?;
    Ok(format!(
        "20 samples, max deviation {worst:.1e}; bleu_4 {:.4}, rouge_l {:.4}, meteor_lite {:.4}, cider {:.4}; SPIDEr(0.733, 0.177) = {sp:.3}",
        report.scores["bleu_4"], report.scores["rouge_l"], report.scores["meteor_lite"], report.scores["cider"]
    ))
}

fn retrieval() -> Check {
    let captions = CaptionGrammar::distinct(50, 77);
    let items: Vec<(String, String)> = captions.iter().enumerate().map(|(i, c)| (format!("a{i:02}"), c.text.clone())).collect();
    let index = RetrievalIndex::build_tfidf(items.clone()).map_err(fail)?;
    let embedder = index.embedder.instantiate().map_err(fail)?;
    let own: Vec<GoldQuery> = items
        .iter()
        .map(|(id, text)| GoldQuery {
            query: text.clone(),
            gold_audio_id: id.clone(),
        })
        .collect();
    let r1 = recall_at_k(&own, &index, embedder.as_ref(), 1).map_err(fail)?;
    if r1 != 1.0 {
        return Err(format!("self R@1 = {r1}"));
    }
    // shortened queries make recall non-trivial
    let partial: Vec<GoldQuery> = items
        .iter()
        .map(|(id, text)| GoldQuery {
            query: text.split_whitespace().take(2).collect::<Vec<_>>().join(" "),
            gold_audio_id: id.clone(),
        })
        .collect();
    let curve: Vec<f64> = [1, 5, 10, 50]
        .iter()
        .map(|&k| recall_at_k(&partial, &index, embedder.as_ref(), k))
        .collect::<prefixcap::Result<_>>()
        .map_err(fail)?;
    if curve.windows(2).any(|w| w[1] < w[0]) || curve[3] != 1.0 {
        return Err(format!("recall curve {curve:?}"));
    }

    // 5-item ranking against every permutation
    let five: Vec<(String, String)> = [
        ("e", "a dog barks in the distance"),
        ("b", "a dog barks"),
        ("d", "rain falls on a metal roof"),
        ("a", "birds chirp while a dog barks"),
        ("c", "a car passes by quickly"),
    ]
    .iter()
    .map(|(i, c)| (i.to_string(), c.to_string()))
    .collect();
    let small = RetrievalIndex::build_tfidf(five.clone()).map_err(fail)?;
    let texts: Vec<&str> = five.iter().map(|(_, c)| c.as_str()).collect();
    let emb = TfIdfEmbedder::fit(&texts, TfIdfEmbedder::DEFAULT_N);
    let query = "dog barks outside";
    let unit = |v: Vec<f32>| {
        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        v.into_iter().map(|x| x as f64 / n).collect::<Vec<f64>>()
    };
    let q = unit(emb.embed(query).map_err(fail)?);
    let scores: Vec<(String, f64)> = five
        .iter()
        .map(|(id, c)| {
            let e = unit(emb.embed(c)?);
            Ok((id.clone(), q.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>()))
        })
        .collect::<prefixcap::Result<_>>()
        .map_err(fail)?;
    let ordered = |perm: &[usize]| {
        perm.windows(2).all(|w| {
            let (a, b) = (&scores[w[0]], &scores[w[1]]);
            a.1 > b.1 + 1e-9 || ((a.1 - b.1).abs() <= 1e-9 && a.0 < b.0)
        })
    };
    let mut oracle = None;
    permutations(&mut (0..5).collect::<Vec<_>>(), 0, &mut |p| {
        if ordered(p) {
            oracle = Some(p.iter().map(|&i| scores[i].0.clone()).collect::<Vec<_>>());
        }
    });
    let oracle = oracle.ok_or("no permutation is sorted")?;
    let ranked: Vec<String> = small.retrieve(query, &emb, 5).map_err(fail)?.into_iter().map(|(id, _)| id).collect();
    ensure(
        ranked == oracle,
        format!("self R@1 100% on 50; partial-query R@1/5/10/50 {curve:?}; 5-item ranking {ranked:?}"),
    )
}

fn permutations(v: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, visit);
        v.swap(k, i);
    }
}

fn ablations(work: &Path, decoder: &Path) -> Check {
    let dir = work.join("ablation");
    write_synthetic_dataset(dir.join("data"), &[(Split::Train, 16), (Split::Val, 4), (Split::Test, 4)], 1.0, 8_000, 3)
        .map_err(fail)?;
    let variants: [(&str, MapperConfig); 4] = [
        ("mappers f_t+f_g", MapperConfig::toy()),
        (
            "bypass",
            MapperConfig {
                enabled: false,
                ..MapperConfig::toy()
            },
        ),
        (
            "f_t only",
            MapperConfig {
                use_global: false,
                ..MapperConfig::toy()
            },
        ),
        (
            "f_g only",
            MapperConfig {
                use_temporal: false,
                ..MapperConfig::toy()
            },
        ),
    ];
    let mut lines = Vec::new();
    for (name, mapper) in variants {
        let mut cfg = RunConfig::toy();
        cfg.mapper = mapper.clone();
        cfg.train.max_steps = Some(20);
        cfg.paths.train_manifests = vec![dir.join("data/manifest.jsonl")];
        cfg.paths.decoder = Some(decoder.to_path_buf());
        cfg.paths.out_dir = dir.join(name.replace([' ', '+'], "_"));
        let summary = train_run(&cfg).map_err(|e| format!("{name}: {e}"))?;
        let loss = summary.final_train_loss.unwrap_or(f64::NAN);
        if !loss.is_finite() || summary.report.is_none() || !summary.scores.contains_key("cider") {
            return Err(format!("{name}: loss {loss}, scores {:?}", summary.scores));
        }
        let (model, _) = CaptionModel::load(summary.best_checkpoint.as_ref().unwrap(), 0, DType::F32, &Device::Cpu).map_err(fail)?;
        let spec = log_mel(&synth_audio(&CaptionGrammar::distinct(1, 0)[0], 1.0, 8_000, 0).map_err(fail)?, &StftConfig::toy())
            .map_err(fail)?;
        let k = model.prefixes_for(&[&spec]).map_err(fail)?.len();
        let n = EncoderConfig::toy().time_len(spec.frames);
        if !mapper.enabled && k != n + 1 {
            return Err(format!("bypass produced {k} prefixes for N = {n}"));
        }
        lines.push(format!("{name}: K={k} loss {loss:.2} cider {:.3}", summary.scores["cider"]));
    }
    Ok(lines.join("; "))
}

fn main() {
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&work);
    std::fs::create_dir_all(&work).unwrap();

    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let r = f();
        let line = match &r {
            Ok(d) => format!("PASS  {name}: {d}"),
            Err(d) => format!("FAIL  {name}: {d}"),
        };
        println!("{line} [{:.1}s]", start.elapsed().as_secs_f64());
        results.push((name, r));
    };

    run("frozen decoder contract", &mut || frozen_decoder(&work));
    run("gradient pass-through", &mut || gradients(&work));
    run("duration invariance", &mut duration_invariance);
    run("feature shapes", &mut shapes);
    run("metric oracles", &mut metric_oracles);
    run("retrieval", &mut retrieval);

    let start = Instant::now();
    let decoder = common::fixture_decoder();
    println!("      fixture decoder ready in {:.1}s (cached across runs)", start.elapsed().as_secs_f64());
    run("memorization", &mut || memorization(&work, &decoder));
    run("ablations", &mut || ablations(&work, &decoder));
    run("full-scale track kept out of CI", &mut || {
        Ok("no check downloads datasets or pretrained weights; everything above runs on synthetic data".into())
    });

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
