//! Naive metric implementations and the frozen golden scores, shared by the
//! metric tests and the acceptance suite.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_corpus.jsonl")
}

// Computed once by a separate script and frozen here.
pub const GOLDEN: [(&str, f64); 7] = [
    ("bleu1", 0.7360429110486165),
    ("bleu2", 0.6173132943320425),
    ("bleu3", 0.5378114063373612),
    ("bleu4", 0.49615895396723836),
    ("rouge_l", 0.6906624655555628),
    ("cider", 3.996287850704044),
    ("meteor_exact", 0.6228808721574535),
];

// Naive reference versions: list scans instead of maps, recursion instead of DP,
// exhaustive alignment enumeration.

pub type Sent = Vec<String>;

pub fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

pub fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn naive_bleu(corpus: &[(Sent, Vec<Sent>)], big_n: usize) -> f64 {
    let (mut c, mut r) = (0usize, 0usize);
    let mut ratios = Vec::new();
    for n in 1..=big_n {
        let (mut num, mut den) = (0, 0);
        for (cand, refs) in corpus {
            let cg = grams(cand, n);
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &cg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                let k = count(&cg, g);
                let m = refs.iter().map(|x| count(&grams(x, n), g)).max().unwrap();
                num += k.min(m);
            }
            den += cg.len();
        }
        ratios.push((num, den));
    }
    for (cand, refs) in corpus {
        c += cand.len();
        let mut best = refs[0].len();
        for x in refs {
            let (d, bd) = (x.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    if ratios.iter().any(|&(a, b)| a == 0 || b == 0) {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let s: f64 = ratios.iter().map(|&(a, b)| (a as f64 / b as f64).ln()).sum();
    bp * (s / big_n as f64).exp()
}

pub fn naive_lcs(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        0
    } else if a[0] == b[0] {
        1 + naive_lcs(&a[1..], &b[1..])
    } else {
        naive_lcs(&a[1..], b).max(naive_lcs(a, &b[1..]))
    }
}

pub fn naive_rouge(cand: &Sent, refs: &[Sent]) -> f64 {
    let mut best: f64 = 0.0;
    for x in refs {
        let l = naive_lcs(cand, x) as f64;
        if l > 0.0 {
            let (p, r) = (l / cand.len() as f64, l / x.len() as f64);
            best = best.max(2.44 * p * r / (r + 1.44 * p));
        }
    }
    best
}

pub fn naive_cider(corpus: &[(Sent, Vec<Sent>)]) -> f64 {
    let big_n = corpus.len() as f64;
    let mut total = 0.0;
    for (cand, refs) in corpus {
        let mut inst = 0.0;
        for n in 1..=4 {
            // explicit dense vectors over every n-gram that appears anywhere
            let mut space: Vec<Vec<String>> = Vec::new();
            for (c, rs) in corpus {
                for g in grams(c, n).into_iter().chain(rs.iter().flat_map(|x| grams(x, n))) {
                    if !space.contains(&g) {
                        space.push(g);
                    }
                }
            }
            let idf: Vec<f64> = space
                .iter()
                .map(|g| {
                    let df = corpus.iter().filter(|(_, rs)| rs.iter().any(|x| count(&grams(x, n), g) > 0)).count();
                    (big_n / df.max(1) as f64).ln()
                })
                .collect();
            let vec_of = |t: &Sent| -> Vec<f64> {
                let tg = grams(t, n);
                space.iter().zip(&idf).map(|(g, w)| count(&tg, g) as f64 * w).collect()
            };
            let cv = vec_of(cand);
            let mut s = 0.0;
            for x in refs {
                let rv = vec_of(x);
                let dot: f64 = cv.iter().zip(&rv).map(|(a, b)| a * b).sum();
                let na = cv.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb = rv.iter().map(|a| a * a).sum::<f64>().sqrt();
                let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
                let d = cand.len() as f64 - x.len() as f64;
                s += cos * (-d * d / 72.0).exp();
            }
            inst += s / refs.len() as f64;
        }
        total += 10.0 * inst / 4.0;
    }
    total / big_n
}

pub fn naive_meteor(cand: &Sent, refs: &[Sent]) -> f64 {
    fn enumerate(pairs: &[(usize, usize)], k: usize, chosen: &mut Vec<(usize, usize)>, best: &mut Option<(usize, usize)>) {
        if k == pairs.len() {
            if chosen.is_empty() {
                return;
            }
            let mut s = chosen.clone();
            s.sort();
            let chunks = 1 + s.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
            let m = s.len();
            if best.map_or(true, |(bm, bc)| m > bm || (m == bm && chunks < bc)) {
                *best = Some((m, chunks));
            }
            return;
        }
        enumerate(pairs, k + 1, chosen, best);
        let (i, j) = pairs[k];
        if chosen.iter().all(|&(a, b)| a != i && b != j) {
            chosen.push((i, j));
            enumerate(pairs, k + 1, chosen, best);
            chosen.pop();
        }
    }
    let mut best_score: f64 = 0.0;
    for x in refs {
        let mut pairs = Vec::new();
        for (i, a) in cand.iter().enumerate() {
            for (j, b) in x.iter().enumerate() {
                if a == b {
                    pairs.push((i, j));
                }
            }
        }
        let mut best = None;
        enumerate(&pairs, 0, &mut Vec::new(), &mut best);
        if let Some((m, ch)) = best {
            let (p, r) = (m as f64 / cand.len() as f64, m as f64 / x.len() as f64);
            let f = p * r / (0.9 * p + 0.1 * r);
            best_score = best_score.max(f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3)));
        }
    }
    best_score
}

pub fn random_sentence(rng: &mut ChaCha8Rng) -> Sent {
    const WORDS: [&str; 5] = ["a", "red", "cat", "on", "mat"];
    let len = rng.gen_range(0..7);
    (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_owned()).collect()
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Sent, Vec<Sent>) {
    let nrefs = rng.gen_range(1..4);
    (random_sentence(rng), (0..nrefs).map(|_| random_sentence(rng)).collect())
}

