//! Skip-gram word embeddings trained with a full softmax.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_WINDOW: usize = 2;

const EMBEDDING_MAGIC: &[u8; 4] = b"EMBD";

/// Every (center, context) pair within `window` positions of each other,
/// never crossing a sentence boundary.
pub fn context_pairs(corpus: &[Vec<usize>], window: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for sentence in corpus {
        for (t, &center) in sentence.iter().enumerate() {
            let lo = t.saturating_sub(window);
            let hi = (t + window).min(sentence.len().saturating_sub(1));
            for j in lo..=hi {
                if j != t {
                    pairs.push((center, sentence[j]));
                }
            }
        }
    }
    pairs
}

/// Center vectors `S` and context vectors `R`, both K×E.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipGramParams {
    pub center: Tensor,
    pub context: Tensor,
    pub window: usize,
}

impl SkipGramParams {
    pub fn zeros(vocab: usize, dim: usize, window: usize) -> Self {
        SkipGramParams {
            center: Tensor::zeros(&[vocab, dim]),
            context: Tensor::zeros(&[vocab, dim]),
            window: window.max(1),
        }
    }

    /// Uniform(-0.5/E, 0.5/E) initialization of both tables.
    pub fn init<R: Rng + ?Sized>(vocab: usize, dim: usize, window: usize, rng: &mut R) -> Self {
        let bound = 0.5 / dim as f64;
        SkipGramParams {
            center: Tensor::uniform(&[vocab, dim], bound, rng),
            context: Tensor::uniform(&[vocab, dim], bound, rng),
            window: window.max(1),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.center.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.center.shape()[1]
    }

    fn check_index(&self, idx: usize) -> Result<()> {
        if idx >= self.vocab_size() {
            return Err(Error::contract(format!(
                "word index {idx} out of range for vocabulary of {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// P(context | center) = exp(R_context·S_center) / Σ_i exp(R_i·S_center).
    pub fn prob(&self, center: usize, context: usize) -> Result<f64> {
        self.check_index(center)?;
        self.check_index(context)?;
        let s = self.center.row(center);
        let scores: Vec<f64> = (0..self.vocab_size())
            .map(|i| self.context.row(i).iter().zip(s).map(|(r, c)| r * c).sum())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|v| (v - max).exp()).sum();
        Ok((scores[context] - max).exp() / total)
    }

    /// The center vectors, which serve as the word representation.
    pub fn export_table(&self) -> EmbeddingTable {
        EmbeddingTable { matrix: self.center.clone() }
    }

    /// One full-batch gradient step on the mean pair loss; returns the loss
    /// before the update.
    pub fn sgd_step(&mut self, pairs: &[(usize, usize)], lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let s = tape.param(self.center.clone());
        let r = tape.param(self.context.clone());
        let total = skipgram_loss_on(&mut tape, s, r, pairs)?;
        let loss = tape.scale(total, 1.0 / pairs.len() as f64);
        tape.backward(loss)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("skip-gram loss became {value}")));
        }
        for (table, var) in [(&mut self.center, s), (&mut self.context, r)] {
            let g = tape.grad(var).expect("param gradient");
            for (w, d) in table.data_mut().iter_mut().zip(g) {
                *w -= lr * d;
            }
        }
        Ok(value)
    }

    /// Runs `steps` full-batch updates and returns the per-step losses.
    pub fn train(&mut self, pairs: &[(usize, usize)], steps: usize, lr: f64) -> Result<Vec<f64>> {
        (0..steps).map(|_| self.sgd_step(pairs, lr)).collect()
    }
}

/// Summed negative log-likelihood of `pairs` under center table `s` and
/// context table `r`, recorded on `tape`.
pub fn skipgram_loss_on(tape: &mut Tape, s: Var, r: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::contract("skip-gram loss needs at least one pair"));
    }
    let k = tape.shape(r)[0];
    let centers: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let gathered = tape.gather_rows(s, &centers)?;
    let r_t = tape.transpose(r)?;
    let scores = tape.matmul(gathered, r_t)?;
    let logp = tape.log_softmax_axis(scores, 1)?;
    let gold: Vec<usize> = pairs
        .iter()
        .enumerate()
        .map(|(i, &(_, ctx))| {
            if ctx >= k {
                Err(Error::contract(format!("context index {ctx} out of range for {k}")))
            } else {
                Ok(i * k + ctx)
            }
        })
        .collect::<Result<_>>()?;
    let picked = tape.select(logp, &gold)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0))
}

/// −Σ log P(context | center) over `pairs`.
pub fn skipgram_loss(pairs: &[(usize, usize)], p: &SkipGramParams) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(p.center.clone());
    let r = tape.constant(p.context.clone());
    let loss = skipgram_loss_on(&mut tape, s, r, pairs)?;
    Ok(tape.value(loss).item())
}

/// K×E word-vector table; row `i` embeds word `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
}

impl EmbeddingTable {
    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.matrix.numel());
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.vocab_size() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_reader<R: Read>(mut r: R, location: &str) -> Result<Self> {
        let bad = |m: &str| Error::format(location, m.to_owned());
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..4] != EMBEDDING_MAGIC {
            return Err(bad("missing EMBD magic"));
        }
        let k = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let e = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        if k == 0 || e == 0 {
            return Err(bad("empty table"));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|_| bad("unreadable payload"))?;
        if payload.len() != k * e * 8 {
            return Err(bad("payload length does not match K*E"));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite entry"));
        }
        Ok(EmbeddingTable { matrix: Tensor::new(vec![k, e], data)? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f), &path.display().to_string())
    }
}
