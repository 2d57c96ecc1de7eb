//! Caption metrics: corpus BLEU-1..4, ROUGE-L, CIDEr and exact-match METEOR.
//!
//! Every function works on already-normalized tokens. Counts live in ordered
//! maps so that floating-point accumulation order, and therefore every score,
//! is reproducible bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::normalize_tokenize;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// One candidate caption and its human references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalInstance {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalInstance {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::contract("an evaluation instance needs at least one reference"));
        }
        Ok(EvalInstance { candidate, references })
    }

    /// Normalizes raw strings before building the instance.
    pub fn from_raw<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<Self> {
        Self::new(
            normalize_tokenize(candidate),
            references.iter().map(|r| normalize_tokenize(r.as_ref())).collect(),
        )
    }
}

#[derive(Deserialize)]
struct JsonInstance {
    #[allow(dead_code)]
    id: serde_json::Value,
    candidate: String,
    references: Vec<String>,
}

/// Parses `{"id", "candidate", "references"}` lines; blank lines are skipped.
pub fn parse_jsonl(text: &str, origin: &str) -> Result<Vec<(String, EvalInstance)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{origin}:{}", n + 1);
        let raw: JsonInstance =
            serde_json::from_str(line).map_err(|e| Error::format(&location, e.to_string()))?;
        let id = match &raw.id {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let inst = EvalInstance::from_raw(&raw.candidate, &raw.references)
            .map_err(|_| Error::format(&location, "references must be nonempty"))?;
        out.push((id, inst));
    }
    Ok(out)
}

pub fn load_jsonl(path: &std::path::Path) -> Result<Vec<(String, EvalInstance)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor_exact: f64,
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = Counts::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_default() += 1;
        }
    }
    out
}

fn require_nonempty(corpus: &[EvalInstance], what: &str) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::contract(format!("{what} needs a nonempty corpus")));
    }
    if corpus.iter().any(|i| i.references.is_empty()) {
        return Err(Error::contract(format!("{what}: every instance needs a reference")));
    }
    Ok(())
}

/// Reference length closest to `len`, preferring the shorter on ties.
fn closest_ref_len(len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(len), r))
        .unwrap_or(0)
}

/// Clipped matches and candidate n-gram totals for n = 1..=max_n, summed
/// over the corpus, plus (candidate length, effective reference length).
fn bleu_stats(corpus: &[EvalInstance], max_n: usize) -> (Vec<(usize, usize)>, usize, usize) {
    let mut stats = vec![(0usize, 0usize); max_n];
    let (mut cand_len, mut ref_len) = (0, 0);
    for inst in corpus {
        cand_len += inst.candidate.len();
        ref_len += closest_ref_len(inst.candidate.len(), &inst.references);
        for (n, slot) in (1..=max_n).zip(stats.iter_mut()) {
            let cand = ngram_counts(&inst.candidate, n);
            let mut max_ref: Counts = Counts::new();
            for r in &inst.references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cand {
                slot.0 += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                slot.1 += c;
            }
        }
    }
    (stats, cand_len, ref_len)
}

/// Modified (clipped) n-gram precision over the corpus.
pub fn modified_precision(corpus: &[EvalInstance], n: usize) -> Result<f64> {
    require_nonempty(corpus, "modified_precision")?;
    let (stats, ..) = bleu_stats(corpus, n);
    let (m, t) = stats[n - 1];
    Ok(if t == 0 { 0.0 } else { m as f64 / t as f64 })
}

/// exp(1 − r/c) when the candidate corpus is shorter than the references.
pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Corpus-level BLEU-N with uniform weights.
pub fn bleu(corpus: &[EvalInstance], max_n: usize) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::contract(format!("BLEU order must be 1..=4, got {max_n}")));
    }
    require_nonempty(corpus, "bleu")?;
    let (stats, c, r) = bleu_stats(corpus, max_n);
    Ok(bleu_from_stats(&stats, c, r))
}

fn bleu_from_stats(stats: &[(usize, usize)], c: usize, r: usize) -> f64 {
    if stats.iter().any(|&(m, t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_sum: f64 = stats.iter().map(|&(m, t)| (m as f64 / t as f64).ln()).sum();
    brevity_penalty(c, r) * (log_sum / stats.len() as f64).exp()
}

/// BLEU-1 through BLEU-4 from a single counting pass.
pub fn bleu_all(corpus: &[EvalInstance]) -> Result<[f64; 4]> {
    require_nonempty(corpus, "bleu")?;
    let (stats, c, r) = bleu_stats(corpus, 4);
    Ok([1, 2, 3, 4].map(|n| bleu_from_stats(&stats[..n], c, r)))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure against the best-matching reference.
pub fn rouge_l(inst: &EvalInstance, beta: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::contract(format!("ROUGE-L beta must be positive, got {beta}")));
    }
    let mut best: f64 = 0.0;
    for r in &inst.references {
        let l = lcs_len(&inst.candidate, r);
        if l == 0 {
            continue;
        }
        let p = l as f64 / inst.candidate.len() as f64;
        let rec = l as f64 / r.len() as f64;
        let b2 = beta * beta;
        best = best.max((1.0 + b2) * p * rec / (rec + b2 * p));
    }
    Ok(best)
}

pub fn rouge_l_corpus(corpus: &[EvalInstance], beta: f64) -> Result<f64> {
    require_nonempty(corpus, "rouge_l")?;
    let mut total = 0.0;
    for inst in corpus {
        total += rouge_l(inst, beta)?;
    }
    Ok(total / corpus.len() as f64)
}

type Tfidf<'a> = BTreeMap<&'a [String], f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, df: &BTreeMap<&[String], usize>, log_n: f64) -> (Tfidf<'a>, f64) {
    let mut v = Tfidf::new();
    let mut norm = 0.0;
    for (g, c) in ngram_counts(tokens, n) {
        let idf = log_n - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        let w = c as f64 * idf;
        norm += w * w;
        v.insert(g, w);
    }
    (v, norm.sqrt())
}

/// Per-instance CIDEr scores (×10 scale); the corpus score is their mean.
pub fn cider_scores(corpus: &[EvalInstance], max_n: usize, sigma: f64) -> Result<Vec<f64>> {
    require_nonempty(corpus, "cider")?;
    let log_n = (corpus.len() as f64).ln();
    let mut per_inst = vec![0.0; corpus.len()];
    for n in 1..=max_n {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for inst in corpus {
            let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
            for r in &inst.references {
                for g in ngram_counts(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_default() += 1;
            }
        }
        for (inst, score) in corpus.iter().zip(per_inst.iter_mut()) {
            let (cv, cn) = tfidf(&inst.candidate, n, &df, log_n);
            let mut sum = 0.0;
            for r in &inst.references {
                let (rv, rn) = tfidf(r, n, &df, log_n);
                let cos = if cn == 0.0 || rn == 0.0 {
                    0.0
                } else {
                    let dot: f64 = cv.iter().filter_map(|(g, w)| rv.get(g).map(|x| w * x)).sum();
                    dot / (cn * rn)
                };
                let delta = inst.candidate.len() as f64 - r.len() as f64;
                sum += cos * (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            }
            *score += sum / inst.references.len() as f64;
        }
    }
    Ok(per_inst.into_iter().map(|s| 10.0 * s / max_n as f64).collect())
}

pub fn cider(corpus: &[EvalInstance], max_n: usize, sigma: f64) -> Result<f64> {
    let scores = cider_scores(corpus, max_n, sigma)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Alignment with the most exact unigram matches and, among those, the
/// fewest chunks. Returns (matches, chunks).
pub fn exact_alignment(cand: &[String], refr: &[String]) -> (usize, usize) {
    let mut cand_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in cand {
        *cand_counts.entry(w).or_default() += 1;
    }
    let mut ref_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in refr {
        *ref_counts.entry(w).or_default() += 1;
    }
    let max_matches: usize = cand_counts
        .iter()
        .map(|(w, c)| (*c).min(ref_counts.get(w).copied().unwrap_or(0)))
        .sum();
    if max_matches == 0 {
        return (0, 0);
    }

    // Suffix counts of candidate tokens that could still match something,
    // used to prune branches that can no longer reach `max_matches`.
    let matchable: Vec<bool> = cand.iter().map(|w| ref_counts.contains_key(w.as_str())).collect();
    let mut remaining = vec![0usize; cand.len() + 1];
    for i in (0..cand.len()).rev() {
        remaining[i] = remaining[i + 1] + usize::from(matchable[i]);
    }

    struct Search<'a> {
        cand: &'a [String],
        refr: &'a [String],
        remaining: Vec<usize>,
        used: Vec<bool>,
        target: usize,
        best: usize,
    }

    impl Search<'_> {
        fn go(&mut self, i: usize, prev: Option<usize>, matched: usize, chunks: usize) {
            if chunks >= self.best || matched + self.remaining[i] < self.target {
                return;
            }
            if matched == self.target {
                self.best = chunks;
                return;
            }
            // Prefer continuing the current chunk, then other positions in order.
            let mut order: Vec<usize> = Vec::new();
            if let Some(p) = prev {
                if p + 1 < self.refr.len() {
                    order.push(p + 1);
                }
            }
            order.extend((0..self.refr.len()).filter(|&j| Some(j) != prev.map(|p| p + 1)));
            for j in order {
                if self.used[j] || self.refr[j] != self.cand[i] {
                    continue;
                }
                let continues = prev.is_some_and(|p| p + 1 == j);
                self.used[j] = true;
                self.go(i + 1, Some(j), matched + 1, chunks + usize::from(!continues));
                self.used[j] = false;
            }
            self.go(i + 1, None, matched, chunks);
        }
    }

    let mut s = Search {
        cand,
        refr,
        remaining,
        used: vec![false; refr.len()],
        target: max_matches,
        best: usize::MAX,
    };
    s.go(0, None, 0, 0);
    (max_matches, s.best)
}

/// METEOR restricted to exact matches, best over references.
pub fn meteor_exact(inst: &EvalInstance, alpha: f64, beta: f64, gamma: f64) -> f64 {
    let mut best: f64 = 0.0;
    for r in &inst.references {
        let (m, chunks) = exact_alignment(&inst.candidate, r);
        if m == 0 {
            continue;
        }
        let p = m as f64 / inst.candidate.len() as f64;
        let rec = m as f64 / r.len() as f64;
        let f_mean = p * rec / (alpha * p + (1.0 - alpha) * rec);
        let penalty = gamma * (chunks as f64 / m as f64).powf(beta);
        best = best.max(f_mean * (1.0 - penalty));
    }
    best
}

pub fn meteor_corpus(corpus: &[EvalInstance]) -> Result<f64> {
    require_nonempty(corpus, "meteor_exact")?;
    let total: f64 = corpus
        .iter()
        .map(|i| meteor_exact(i, METEOR_ALPHA, METEOR_BETA, METEOR_GAMMA))
        .sum();
    Ok(total / corpus.len() as f64)
}

/// All metrics with their standard parameters.
pub fn score_corpus(corpus: &[EvalInstance]) -> Result<ScoreReport> {
    require_nonempty(corpus, "score_corpus")?;
    let [bleu1, bleu2, bleu3, bleu4] = bleu_all(corpus)?;
    Ok(ScoreReport {
        bleu1,
        bleu2,
        bleu3,
        bleu4,
        rouge_l: rouge_l_corpus(corpus, ROUGE_BETA)?,
        cider: cider(corpus, CIDER_MAX_N, CIDER_SIGMA)?,
        meteor_exact: meteor_corpus(corpus)?,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn inst(c: &str, refs: &[&str]) -> EvalInstance {
        EvalInstance::new(toks(c), refs.iter().map(|r| toks(r)).collect()).unwrap()
    }

    #[test]
    fn perfect_match_scores_one() {
        let c = [inst("a man riding a horse on the beach", &["a man riding a horse on the beach", "someone rides"])];
        for n in 1..=4 {
            assert_eq!(bleu(&c, n).unwrap(), 1.0);
        }
        assert_eq!(rouge_l(&c[0], ROUGE_BETA).unwrap(), 1.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let c = [inst("the the the the the the the", &["the cat is on the mat"])];
        assert!((modified_precision(&c, 1).unwrap() - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn brevity_penalty_case() {
        let c = [inst("a b c", &["a b c d e f"])];
        let expected = (-1f64).exp();
        assert!((bleu(&c, 1).unwrap() - expected).abs() < 1e-15);
        assert_eq!(brevity_penalty(6, 3), 1.0);
        assert_eq!(brevity_penalty(0, 3), 0.0);
    }

    #[test]
    fn bleu_contracts() {
        assert!(bleu(&[], 1).is_err());
        assert!(bleu(&[inst("a", &["a"])], 5).is_err());
        assert!(EvalInstance::new(toks("a"), vec![]).is_err());
        // too short for any bigram
        assert_eq!(bleu(&[inst("a", &["a"])], 2).unwrap(), 0.0);
    }

    #[test]
    fn closest_reference_prefers_shorter_on_ties() {
        let refs = vec![toks("a b c d e"), toks("a b c")];
        assert_eq!(closest_ref_len(4, &refs), 3);
        assert_eq!(closest_ref_len(5, &refs), 5);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&inst("a b", &["c d"]), ROUGE_BETA).unwrap(), 0.0);
        assert_eq!(rouge_l(&inst("", &["c d"]), ROUGE_BETA).unwrap(), 0.0);
        let got = rouge_l(&inst("the cat sat", &["the cat on the mat"]), 1.2).unwrap();
        let (p, r) = (2.0 / 3.0, 2.0 / 5.0);
        let want = (1.0 + 1.44) * p * r / (r + 1.44 * p);
        assert!((got - want).abs() < 1e-15);
        assert!(rouge_l(&inst("a", &["a"]), 0.0).is_err());
    }

    #[test]
    fn cider_cases() {
        let none = [inst("x y z", &["a b c"]), inst("a b", &["d e"])];
        assert_eq!(cider_scores(&none, 4, 6.0).unwrap()[0], 0.0);
        let single = [inst("a b c", &["a b c", "a b c"])];
        assert_eq!(cider(&single, 4, 6.0).unwrap(), 0.0);
    }

    #[test]
    fn meteor_cases() {
        let same = inst("a b c d e", &["a b c d e"]);
        assert!((meteor_exact(&same, 0.9, 3.0, 0.5) - 0.996).abs() < 1e-12);
        assert_eq!(meteor_exact(&inst("a b", &["c d"]), 0.9, 3.0, 0.5), 0.0);
        let swapped = inst("a b", &["b a"]);
        assert!((meteor_exact(&swapped, 0.9, 3.0, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn alignment_prefers_fewest_chunks() {
        // greedy first-occurrence matching would split "the cat" into two chunks
        let (m, ch) = exact_alignment(&toks("the cat sat"), &toks("the dog and the cat sat"));
        assert_eq!((m, ch), (3, 1));
        assert_eq!(exact_alignment(&toks("a a a"), &toks("a a")), (2, 1));
    }

    #[test]
    fn report_for_perfect_corpus() {
        let c = [inst("a red square", &["a red square", "there is a red square"]), inst("a blue circle above a green triangle", &["a blue circle above a green triangle"])];
        let r = score_corpus(&c).unwrap();
        assert_eq!([r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l], [1.0; 5]);
        assert!(score_corpus(&[]).is_err());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.starts_with("{\"bleu1\":1.0,"));
    }

    fn small_sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..8)
            .prop_map(|v| v.into_iter().map(str::to_owned).collect())
    }

    fn small_instance() -> impl Strategy<Value = EvalInstance> {
        (small_sentence(), prop::collection::vec(small_sentence(), 1..4))
            .prop_map(|(c, r)| EvalInstance { candidate: c, references: r })
    }

    proptest! {
        #[test]
        fn scores_stay_in_range(corpus in prop::collection::vec(small_instance(), 1..6)) {
            let r = score_corpus(&corpus).unwrap();
            for v in [r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l, r.meteor_exact] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "{r:?}");
            }
            prop_assert!((0.0..=10.0 + 1e-9).contains(&r.cider));
        }

        #[test]
        fn order_invariance(corpus in prop::collection::vec(small_instance(), 1..6)) {
            let mut rev = corpus.clone();
            rev.reverse();
            let (a, b) = (score_corpus(&corpus).unwrap(), score_corpus(&rev).unwrap());
            prop_assert!((a.bleu4 - b.bleu4).abs() < 1e-12 && (a.bleu1 - b.bleu1).abs() < 1e-12);
            prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
            prop_assert!((a.cider - b.cider).abs() < 1e-9);
            prop_assert!((a.meteor_exact - b.meteor_exact).abs() < 1e-12);
        }

        #[test]
        fn appending_a_miss_never_adds_matches(i in small_instance()) {
            let before = bleu_stats(std::slice::from_ref(&i), 4).0;
            let mut j = i.clone();
            j.candidate.push("zzz".into());
            let after = bleu_stats(std::slice::from_ref(&j), 4).0;
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(a.0 <= b.0);
            }
        }
    }
}
