//! Caption normalization, vocabulary and 1-of-K encoding.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

pub const DEFAULT_MAX_CAPTION_LEN: usize = 20;

/// Lowercases, blanks out everything that is not an ASCII letter, and splits
/// on whitespace.
pub fn normalize_tokenize(raw: &str) -> Vec<String> {
    let cleaned: String = raw
        .chars()
        .map(|c| if c.is_ascii_alphabetic() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Word/index bijection with four reserved slots at the front.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// frequency and then alphabetically.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
        }
        let min_count = min_count.max(1);
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for sentence in corpus {
            for w in sentence {
                *freq.entry(w.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !RESERVED.contains(w))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_entries(kept.into_iter().map(|(w, c)| (w.to_owned(), c)))
    }

    fn from_entries(entries: impl IntoIterator<Item = (String, u64)>) -> Result<Self> {
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; RESERVED.len()];
        for (w, c) in entries {
            words.push(w);
            counts.push(c);
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate word {w:?}")));
            }
        }
        Ok(Vocabulary { words, counts, index })
    }

    /// K, including the reserved tokens.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, idx: usize) -> Option<&str> {
        self.words.get(idx).map(String::as_str)
    }

    pub fn frequency(&self, idx: usize) -> Option<u64> {
        self.counts.get(idx).copied()
    }

    /// Non-reserved words in index order.
    pub fn words(&self) -> &[String] {
        &self.words[RESERVED.len()..]
    }

    /// `<start> w… <end>`, with out-of-vocabulary words mapped to `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Caption {
        let mut tokens = Vec::with_capacity(words.len() + 2);
        tokens.push(START);
        for w in words {
            let w = w.as_ref();
            let idx = match self.index_of(w) {
                Some(i) if i >= RESERVED.len() => i,
                _ => UNK,
            };
            tokens.push(idx);
        }
        tokens.push(END);
        Caption { tokens }
    }

    /// Like [`encode`](Self::encode) but keeps at most `max_words` interior
    /// words.
    pub fn encode_truncated<S: AsRef<str>>(&self, words: &[S], max_words: usize) -> Caption {
        self.encode(&words[..words.len().min(max_words)])
    }

    /// Drops reserved tokens and joins the rest with single spaces.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t >= RESERVED.len())
            .filter_map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `index<TAB>word<TAB>frequency` lines, reserved tokens first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, (w, c)) in self.words.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(out, "{i}\t{w}\t{c}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::format(format!("vocabulary line {}", lineno + 1), msg.to_owned());
            let mut fields = line.split('\t');
            let (Some(idx), Some(word), Some(freq), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected index<TAB>word<TAB>frequency"));
            };
            let idx: usize = idx.parse().map_err(|_| bad("bad index"))?;
            let freq: u64 = freq.parse().map_err(|_| bad("bad frequency"))?;
            if idx != lineno {
                return Err(bad("indices must be dense and ascending"));
            }
            if idx < RESERVED.len() {
                if word != RESERVED[idx] {
                    return Err(bad("reserved token out of place"));
                }
                continue;
            }
            if word.is_empty() || !word.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(bad("words must be lowercase alphabetic"));
            }
            entries.push((word.to_owned(), freq));
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text).map_err(|e| match e {
            Error::Format { location, message } => {
                Error::format(format!("{}: {location}", path.display()), message)
            }
            other => other,
        })
    }
}

/// Encoded caption: a sequence of vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub tokens: Vec<usize>,
}

impl Caption {
    pub fn new(tokens: Vec<usize>) -> Self {
        Caption { tokens }
    }

    /// Starts with `<start>`, ends with `<end>`, and holds neither in between.
    pub fn is_well_formed(&self) -> bool {
        let t = &self.tokens;
        t.len() >= 2
            && t[0] == START
            && t[t.len() - 1] == END
            && t[1..t.len() - 1].iter().all(|&x| x != START && x != END)
    }

    /// Number of next-word predictions teacher forcing makes on this caption.
    pub fn prediction_len(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }
}
