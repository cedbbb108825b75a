//! Captioning metrics over normalized word tokens.

use std::collections::{HashMap, HashSet};

use rust_stemmers::{Algorithm, Stemmer};

use super::corpus::Tokenized;

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-1..max_n with multi-reference clipping and the closest
/// reference length for the brevity penalty. Unsmoothed: a zero precision at
/// any order makes that and every higher order 0.
pub(crate) fn bleu(corpus: &[Tokenized], max_n: usize) -> Vec<f64> {
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for item in corpus {
        let c = item.candidate.len();
        cand_len += c;
        // closest reference length, shorter one on ties
        ref_len += item
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for n in 1..=max_n {
            let cand = ngrams(&item.candidate, n);
            let mut max_ref: Counts = HashMap::new();
            for r in &item.references {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cand {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 {
            zero = true;
        }
        if zero {
            out.push(0.0);
            continue;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        out.push(bp * (log_sum / (n + 1) as f64).exp());
    }
    out
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Per-sample ROUGE-L: best precision and best recall over the references
/// combined into a recall-weighted F-measure.
pub(crate) fn rouge_l(item: &Tokenized) -> f64 {
    let mut p_max: f64 = 0.0;
    let mut r_max: f64 = 0.0;
    for r in &item.references {
        let l = lcs(&item.candidate, r) as f64;
        if !item.candidate.is_empty() {
            p_max = p_max.max(l / item.candidate.len() as f64);
        }
        if !r.is_empty() {
            r_max = r_max.max(l / r.len() as f64);
        }
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_N: usize = 4;

struct TfIdf<'a> {
    vecs: Vec<HashMap<&'a [String], f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&[String], f64>, log_docs: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(CIDER_N);
    let mut norms = Vec::with_capacity(CIDER_N);
    for n in 1..=CIDER_N {
        let v: HashMap<&[String], f64> = ngrams(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
                (g, tf as f64 * (log_docs - d))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

/// Per-sample CIDEr-D scores (×10, clipped n-gram weights, gaussian length
/// penalty). Document frequencies come from the reference sets.
pub(crate) fn cider_d(corpus: &[Tokenized]) -> Vec<f64> {
    let mut df: HashMap<&[String], f64> = HashMap::new();
    for item in corpus {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for r in &item.references {
            for n in 1..=CIDER_N {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_docs = (corpus.len() as f64).ln();
    corpus
        .iter()
        .map(|item| {
            let cand = tfidf(&item.candidate, &df, log_docs);
            let mut total = 0.0;
            for r in &item.references {
                let reference = tfidf(r, &df, log_docs);
                let delta = cand.len as f64 - reference.len as f64;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                let mut sum = 0.0;
                for n in 0..CIDER_N {
                    let mut dot = 0.0;
                    for (g, cv) in &cand.vecs[n] {
                        if let Some(rv) = reference.vecs[n].get(g) {
                            dot += cv.min(*rv) * rv;
                        }
                    }
                    if cand.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                        dot /= cand.norms[n] * reference.norms[n];
                    }
                    sum += dot * penalty;
                }
                total += sum / CIDER_N as f64;
            }
            total / item.references.len() as f64 * 10.0
        })
        .collect()
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;

/// (candidate position, reference position) pairs.
pub(crate) type Alignment = Vec<(usize, usize)>;

/// Search budget for [`meteor_align`]; past it the best alignment found so
/// far is kept. Only captions with many repeated words get near it.
const METEOR_SEARCH_NODES: usize = 200_000;

/// Word alignment between candidate and reference. Pairs are exact matches
/// or matches of the stems; among all one-to-one alignments the chosen one
/// has the most exact matches, then the most matches overall, then the
/// fewest chunks (ties: first found in a left-to-right search).
pub(crate) fn meteor_align(cand: &[String], reference: &[String], stem: &dyn Fn(&str) -> String) -> Alignment {
    let cand_stems: Vec<String> = cand.iter().map(|w| stem(w)).collect();
    let ref_stems: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    // options[i]: (reference position, exact?) with exact ones first
    let options: Vec<Vec<(usize, bool)>> = (0..cand.len())
        .map(|i| {
            let mut o: Vec<(usize, bool)> = (0..reference.len())
                .filter(|&j| cand_stems[i] == ref_stems[j] || cand[i] == reference[j])
                .map(|j| (j, cand[i] == reference[j]))
                .collect();
            o.sort_by_key(|&(j, exact)| (!exact, j));
            o
        })
        .collect();
    // suffix counts of candidate words that could still match at all
    let mut can_match = vec![0usize; cand.len() + 1];
    let mut can_exact = vec![0usize; cand.len() + 1];
    for i in (0..cand.len()).rev() {
        can_match[i] = can_match[i + 1] + usize::from(!options[i].is_empty());
        can_exact[i] = can_exact[i + 1] + usize::from(options[i].iter().any(|o| o.1));
    }

    struct Search<'a> {
        options: &'a [Vec<(usize, bool)>],
        can_match: &'a [usize],
        can_exact: &'a [usize],
        used: Vec<bool>,
        path: Alignment,
        best: Option<((usize, usize, std::cmp::Reverse<usize>), Alignment)>,
        nodes: usize,
    }

    impl Search<'_> {
        fn key(exact: usize, total: usize, chunks: usize) -> (usize, usize, std::cmp::Reverse<usize>) {
            (exact, total, std::cmp::Reverse(chunks))
        }

        fn visit(&mut self, i: usize, exact: usize, chunks: usize) {
            self.nodes += 1;
            let total = self.path.len();
            if let Some((best, _)) = &self.best {
                // optimistic: every remaining word matches, exactly where it can,
                // without opening a chunk
                let bound = Self::key(exact + self.can_exact[i], total + self.can_match[i], chunks);
                if bound <= *best || self.nodes > METEOR_SEARCH_NODES {
                    return;
                }
            }
            if i == self.options.len() {
                self.best = Some((Self::key(exact, total, chunks), self.path.clone()));
                return;
            }
            for k in 0..self.options[i].len() {
                let (j, is_exact) = self.options[i][k];
                if self.used[j] {
                    continue;
                }
                let extends = self.path.last().is_some_and(|&(pi, pj)| pi + 1 == i && pj + 1 == j);
                self.used[j] = true;
                self.path.push((i, j));
                self.visit(i + 1, exact + usize::from(is_exact), chunks + usize::from(!extends));
                self.path.pop();
                self.used[j] = false;
            }
            self.visit(i + 1, exact, chunks);
        }
    }

    let mut search = Search {
        options: &options,
        can_match: &can_match,
        can_exact: &can_exact,
        used: vec![false; reference.len()],
        path: Vec::new(),
        best: None,
        nodes: 0,
    };
    search.visit(0, 0, 0);
    search.best.map(|(_, a)| a).unwrap_or_default()
}

/// Maximal runs of matches adjacent in both sentences.
pub(crate) fn chunks(alignment: &Alignment) -> usize {
    let mut n = 0;
    for (k, &(i, j)) in alignment.iter().enumerate() {
        if k == 0 {
            n += 1;
            continue;
        }
        let (pi, pj) = alignment[k - 1];
        if !(i == pi + 1 && j == pj + 1) {
            n += 1;
        }
    }
    n
}

pub(crate) fn english_stemmer() -> impl Fn(&str) -> String {
    let s = Stemmer::create(Algorithm::English);
    move |w: &str| s.stem(w).into_owned()
}

/// Per-sample METEOR without synonym or paraphrase matching; best over the
/// references.
pub(crate) fn meteor_lite(item: &Tokenized, stem: &dyn Fn(&str) -> String) -> f64 {
    item.references
        .iter()
        .map(|r| {
            let a = meteor_align(&item.candidate, r, stem);
            let m = a.len() as f64;
            if m == 0.0 {
                return 0.0;
            }
            let p = m / item.candidate.len() as f64;
            let rec = m / r.len() as f64;
            let fmean = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
            let penalty = METEOR_GAMMA * (chunks(&a) as f64 / m).powf(METEOR_BETA);
            fmean * (1.0 - penalty)
        })
        .fold(0.0, f64::max)
}
