//! Shared test support: brute-force metric oracles written independently of
//! the library, and the cached fixture decoder.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use prefixcap::eval::{EvalCorpus, EvalEntry};
use prefixcap::fixture::{ensure_fixture_decoder, CaptionGrammar, FixtureLmConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Words = Vec<String>;

pub struct Sample {
    pub id: String,
    pub cand: Words,
    pub refs: Vec<Words>,
}

fn words(s: &str) -> Words {
    s.split_whitespace().map(str::to_string).collect()
}

/// `n` synthetic samples whose references overlap the candidate partially,
/// including inflected variants that only match after stemming.
pub fn metric_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inflect = ["s", "ing", "ed"];
    (0..n)
        .map(|i| {
            let cand = words(&CaptionGrammar::sample(&mut rng).text);
            let n_refs = rng.random_range(1..=5);
            let refs = (0..n_refs)
                .map(|_| {
                    let mut r = match rng.random_range(0..3) {
                        // unrelated caption
                        0 => words(&CaptionGrammar::sample(&mut rng).text),
                        // candidate with edits
                        _ => {
                            let mut r = cand.clone();
                            for w in r.iter_mut() {
                                if rng.random_bool(0.25) {
                                    w.push_str(inflect[rng.random_range(0..inflect.len())]);
                                }
                            }
                            if rng.random_bool(0.5) && r.len() > 2 {
                                let k = rng.random_range(0..r.len());
                                r.remove(k);
                            }
                            r
                        }
                    };
                    if rng.random_bool(0.3) {
                        r.extend(words(&CaptionGrammar::sample(&mut rng).text).into_iter().take(3));
                    }
                    r
                })
                .collect();
            Sample {
                id: format!("s{i:02}"),
                cand,
                refs,
            }
        })
        .collect()
}

pub fn to_corpus(samples: &[Sample]) -> EvalCorpus {
    EvalCorpus::new(
        samples
            .iter()
            .map(|s| EvalEntry {
                audio_id: s.id.clone(),
                candidate: s.cand.join(" "),
                references: s.refs.iter().map(|r| r.join(" ")).collect(),
            })
            .collect(),
    )
    .unwrap()
}

fn grams(tokens: &[String], n: usize) -> Vec<Words> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn occurrences(list: &[Words], g: &Words) -> usize {
    list.iter().filter(|x| *x == g).count()
}

/// Corpus BLEU-`n` straight from the definition.
pub fn bleu(samples: &[Sample], n: usize) -> f64 {
    let mut log_p = 0.0;
    for k in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for s in samples {
            let cg = grams(&s.cand, k);
            total += cg.len();
            let mut distinct: Vec<&Words> = Vec::new();
            for g in &cg {
                if !distinct.contains(&g) {
                    distinct.push(g);
                }
            }
            for g in distinct {
                let best_ref = s.refs.iter().map(|r| occurrences(&grams(r, k), g)).max().unwrap_or(0);
                matched += occurrences(&cg, g).min(best_ref);
            }
        }
        if matched == 0 {
            return 0.0;
        }
        log_p += (matched as f64 / total as f64).ln();
    }
    let c: usize = samples.iter().map(|s| s.cand.len()).sum();
    let r: usize = samples
        .iter()
        .map(|s| {
            let mut best = s.refs[0].len();
            for x in &s.refs {
                let (d, bd) = (x.len().abs_diff(s.cand.len()), best.abs_diff(s.cand.len()));
                if d < bd || (d == bd && x.len() < best) {
                    best = x.len();
                }
            }
            best
        })
        .sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_p / n as f64).exp()
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|w| it.any(|h| h == *w))
}

/// Longest common subsequence by trying every subset of the candidate.
fn lcs_brute(cand: &[String], reference: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << cand.len()) {
        let pick: Vec<&String> = (0..cand.len()).filter(|i| mask >> i & 1 == 1).map(|i| &cand[i]).collect();
        if pick.len() > best && is_subsequence(&pick, reference) {
            best = pick.len();
        }
    }
    best
}

pub fn rouge_l(s: &Sample) -> f64 {
    let beta: f64 = 1.2;
    let mut p: f64 = 0.0;
    let mut r: f64 = 0.0;
    for x in &s.refs {
        let l = lcs_brute(&s.cand, x) as f64;
        p = p.max(l / s.cand.len() as f64);
        r = r.max(l / x.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    (1.0 + beta * beta) * p * r / (r + beta * beta * p)
}

/// Per-sample CIDEr-D.
pub fn cider(samples: &[Sample]) -> Vec<f64> {
    let docs = samples.len() as f64;
    let df = |g: &Words| -> f64 {
        samples
            .iter()
            .filter(|s| s.refs.iter().any(|r| grams(r, g.len()).contains(g)))
            .count() as f64
    };
    let vector = |t: &Words, n: usize| -> BTreeMap<Words, f64> {
        let mut v = BTreeMap::new();
        let all = grams(t, n);
        for g in &all {
            let tf = occurrences(&all, g) as f64;
            v.insert(g.clone(), tf * (docs.ln() - df(g).max(1.0).ln()));
        }
        v
    };
    let norm = |v: &BTreeMap<Words, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    samples
        .iter()
        .map(|s| {
            let mut acc = 0.0;
            for r in &s.refs {
                let delta = s.cand.len() as f64 - r.len() as f64;
                let penalty = (-(delta * delta) / 72.0).exp();
                let mut per_n = 0.0;
                for n in 1..=4 {
                    let (vc, vr) = (vector(&s.cand, n), vector(r, n));
                    let (nc, nr) = (norm(&vc), norm(&vr));
                    if nc == 0.0 || nr == 0.0 {
                        continue;
                    }
                    let dot: f64 = vc.iter().filter_map(|(g, c)| vr.get(g).map(|rv| c.min(*rv) * rv)).sum();
                    per_n += dot / (nc * nr) * penalty;
                }
                acc += per_n / 4.0;
            }
            10.0 * acc / s.refs.len() as f64
        })
        .collect()
}

fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    let mut sorted = pairs.to_vec();
    sorted.sort();
    let mut n = 0;
    for k in 0..sorted.len() {
        if k == 0 || sorted[k].0 != sorted[k - 1].0 + 1 || sorted[k].1 != sorted[k - 1].1 + 1 {
            n += 1;
        }
    }
    n
}

/// METEOR without synonyms over every possible one-to-one alignment: most
/// exact matches, then most matches, then fewest chunks; best reference.
pub fn meteor(s: &Sample) -> f64 {
    let stemmer = rust_stemmers::Stemmer::create(rust_stemmers::Algorithm::English);
    let stem = |w: &str| stemmer.stem(w).into_owned();
    let mut best_score: f64 = 0.0;
    for r in &s.refs {
        let mut all: Vec<Vec<(usize, usize, bool)>> = vec![Vec::new()];
        for (i, cw) in s.cand.iter().enumerate() {
            let mut next = Vec::new();
            for a in &all {
                next.push(a.clone());
                for (j, rw) in r.iter().enumerate() {
                    if a.iter().any(|p| p.1 == j) {
                        continue;
                    }
                    let exact = cw == rw;
                    if exact || stem(cw) == stem(rw) {
                        let mut b = a.clone();
                        b.push((i, j, exact));
                        next.push(b);
                    }
                }
            }
            all = next;
        }
        let key = |a: &Vec<(usize, usize, bool)>| {
            let pairs: Vec<(usize, usize)> = a.iter().map(|p| (p.0, p.1)).collect();
            (a.iter().filter(|p| p.2).count(), a.len(), std::cmp::Reverse(chunk_count(&pairs)))
        };
        let best = all.iter().max_by_key(|a| key(a)).unwrap();
        let m = best.len() as f64;
        if m == 0.0 {
            continue;
        }
        let pairs: Vec<(usize, usize)> = best.iter().map(|p| (p.0, p.1)).collect();
        let p = m / s.cand.len() as f64;
        let rc = m / r.len() as f64;
        let f = p * rc / (0.9 * p + 0.1 * rc);
        let frag = chunk_count(&pairs) as f64 / m;
        best_score = best_score.max(f * (1.0 - 0.5 * frag.powi(3)));
    }
    best_score
}

/// The fixture decoder, pretrained once and cached across test runs.
pub fn fixture_decoder() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("prefixcap-fixture");
    std::fs::create_dir_all(&dir).unwrap();
    ensure_fixture_decoder(dir.join("fixture_lm.safetensors"), &FixtureLmConfig::default()).unwrap()
}
