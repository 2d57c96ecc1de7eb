//! Encoder-decoder captioner: projected feature grid, additive attention and
//! a GRU decoder over word embeddings.

use rand::Rng;

use crate::attention::{attend_with_keys, project_keys, AttentionParams, AttentionVars};
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::gru::{gru_step, GruParams, GruVars, GRU_BLOCKS};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{Caption, END, PAD, START};

/// H×W grid of D-channel feature vectors, stored (row, col, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    depth: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, depth: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || depth == 0 {
            return Err(Error::dim("feature grid", format!("empty grid {rows}x{cols}x{depth}")));
        }
        if values.len() != rows * cols * depth {
            return Err(Error::dim(
                "feature grid",
                format!("{rows}x{cols}x{depth} needs {} values, got {}", rows * cols * depth, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature grid contains a non-finite value".into()));
        }
        Ok(FeatureGrid { rows, cols, depth, values })
    }

    pub fn zeros(rows: usize, cols: usize, depth: usize) -> Self {
        FeatureGrid { rows, cols, depth, values: vec![0.0; rows * cols * depth] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of positions T = H·W.
    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.depth;
        &self.values[start..start + self.depth]
    }

    /// The grid flattened to T rows of D channels.
    pub fn annotations(&self) -> Tensor {
        Tensor::new(vec![self.positions(), self.depth], self.values.clone()).expect("validated grid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptionerDims {
    pub feature_dim: usize,
    pub enc_dim: usize,
    pub dec_dim: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub vocab_size: usize,
}

/// Every learnable block of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerParams {
    pub enc_proj: Tensor,
    pub enc_bias: Tensor,
    pub init_proj: Tensor,
    pub init_bias: Tensor,
    pub embedding: Tensor,
    pub gru: GruParams,
    pub attn: AttentionParams,
    pub out_proj: Tensor,
    pub out_bias: Tensor,
}

/// Block names in serialization order.
pub fn block_names() -> Vec<String> {
    let mut names: Vec<String> =
        ["enc_proj", "enc_bias", "init_proj", "init_bias", "embedding"].iter().map(|s| s.to_string()).collect();
    names.extend(GRU_BLOCKS.iter().map(|b| format!("gru.{b}")));
    names.extend(["attn.w_s", "attn.w_h", "attn.v", "out_proj", "out_bias"].iter().map(|s| s.to_string()));
    names
}

impl CaptionerParams {
    pub fn zeros(d: CaptionerDims) -> Self {
        CaptionerParams {
            enc_proj: Tensor::zeros(&[d.enc_dim, d.feature_dim]),
            enc_bias: Tensor::zeros(&[d.enc_dim]),
            init_proj: Tensor::zeros(&[d.dec_dim, d.enc_dim]),
            init_bias: Tensor::zeros(&[d.dec_dim]),
            embedding: Tensor::zeros(&[d.vocab_size, d.embed_dim]),
            gru: GruParams::zeros(d.embed_dim + d.enc_dim, d.dec_dim),
            attn: AttentionParams::zeros(d.dec_dim, d.enc_dim, d.attn_dim),
            out_proj: Tensor::zeros(&[d.vocab_size, d.dec_dim]),
            out_bias: Tensor::zeros(&[d.vocab_size]),
        }
    }

    /// Dense layers uniform(-1/√fan_in, 1/√fan_in), embeddings
    /// uniform(-0.5/E, 0.5/E), biases zero.
    pub fn init<R: Rng + ?Sized>(d: CaptionerDims, rng: &mut R) -> Self {
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let enc_proj = Tensor::uniform(&[d.enc_dim, d.feature_dim], fan(d.feature_dim), rng);
        let init_proj = Tensor::uniform(&[d.dec_dim, d.enc_dim], fan(d.enc_dim), rng);
        let embedding = Tensor::uniform(&[d.vocab_size, d.embed_dim], 0.5 / d.embed_dim as f64, rng);
        let gru = GruParams::init(d.embed_dim + d.enc_dim, d.dec_dim, rng);
        let attn = AttentionParams::init(d.dec_dim, d.enc_dim, d.attn_dim, rng);
        let out_proj = Tensor::uniform(&[d.vocab_size, d.dec_dim], fan(d.dec_dim), rng);
        CaptionerParams {
            enc_proj,
            enc_bias: Tensor::zeros(&[d.enc_dim]),
            init_proj,
            init_bias: Tensor::zeros(&[d.dec_dim]),
            embedding,
            gru,
            attn,
            out_proj,
            out_bias: Tensor::zeros(&[d.vocab_size]),
        }
    }

    /// Replaces the word embeddings with a pre-trained table.
    pub fn with_embedding(mut self, table: &EmbeddingTable) -> Result<Self> {
        if table.matrix.shape() != self.embedding.shape() {
            return Err(Error::dim(
                "with_embedding",
                format!("table {:?} vs model {:?}", table.matrix.shape(), self.embedding.shape()),
            ));
        }
        self.embedding = table.matrix.clone();
        Ok(self)
    }

    pub fn dims(&self) -> CaptionerDims {
        CaptionerDims {
            feature_dim: self.enc_proj.shape()[1],
            enc_dim: self.enc_proj.shape()[0],
            dec_dim: self.out_proj.shape()[1],
            embed_dim: self.embedding.shape()[1],
            attn_dim: self.attn.attn_dim(),
            vocab_size: self.out_proj.shape()[0],
        }
    }

    /// Cross-checks every block's shape against the others.
    pub fn validate(&self) -> Result<()> {
        for (name, t) in self.named_blocks() {
            let want_rank = if name.ends_with("bias") || name.starts_with("gru.b_") || name == "attn.v" { 1 } else { 2 };
            if t.rank() != want_rank {
                return Err(Error::dim("captioner params", format!("{name} has shape {:?}", t.shape())));
            }
        }
        let d = self.dims();
        let expect = |t: &Tensor, s: &[usize], name: &str| {
            if t.shape() != s {
                Err(Error::dim("captioner params", format!("{name} is {:?}, expected {s:?}", t.shape())))
            } else {
                Ok(())
            }
        };
        expect(&self.enc_bias, &[d.enc_dim], "enc_bias")?;
        expect(&self.init_proj, &[d.dec_dim, d.enc_dim], "init_proj")?;
        expect(&self.init_bias, &[d.dec_dim], "init_bias")?;
        expect(&self.embedding, &[d.vocab_size, d.embed_dim], "embedding")?;
        self.gru.validate()?;
        expect(&self.gru.w_z, &[d.dec_dim, d.embed_dim + d.enc_dim], "gru.w_z")?;
        self.attn.validate()?;
        expect(&self.attn.w_s, &[d.attn_dim, d.dec_dim], "attn.w_s")?;
        expect(&self.attn.w_h, &[d.attn_dim, d.enc_dim], "attn.w_h")?;
        expect(&self.out_bias, &[d.vocab_size], "out_bias")?;
        Ok(())
    }

    pub fn named_blocks(&self) -> Vec<(String, &Tensor)> {
        let mut refs: Vec<&Tensor> = vec![&self.enc_proj, &self.enc_bias, &self.init_proj, &self.init_bias, &self.embedding];
        refs.extend(self.gru.blocks());
        refs.extend(self.attn.blocks());
        refs.push(&self.out_proj);
        refs.push(&self.out_bias);
        block_names().into_iter().zip(refs).collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut refs: Vec<&mut Tensor> = vec![
            &mut self.enc_proj,
            &mut self.enc_bias,
            &mut self.init_proj,
            &mut self.init_bias,
            &mut self.embedding,
        ];
        refs.extend(self.gru.blocks_mut());
        refs.extend(self.attn.blocks_mut());
        refs.push(&mut self.out_proj);
        refs.push(&mut self.out_bias);
        refs
    }

    /// Rebuilds parameters from blocks in [`block_names`] order.
    pub fn from_blocks(blocks: Vec<Tensor>) -> Result<Self> {
        let n = block_names().len();
        if blocks.len() != n {
            return Err(Error::contract(format!("expected {n} parameter blocks, got {}", blocks.len())));
        }
        let mut it = blocks.into_iter();
        let mut next = || it.next().expect("length checked");
        let p = CaptionerParams {
            enc_proj: next(),
            enc_bias: next(),
            init_proj: next(),
            init_bias: next(),
            embedding: next(),
            gru: GruParams {
                w_z: next(),
                w_r: next(),
                w_h: next(),
                u_z: next(),
                u_r: next(),
                u_h: next(),
                b_z: next(),
                b_r: next(),
                b_h: next(),
            },
            attn: AttentionParams { w_s: next(), w_h: next(), v: next() },
            out_proj: next(),
            out_bias: next(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.named_blocks().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> CaptionerVars {
        let mut put = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let enc_proj = put(&self.enc_proj);
        let enc_bias = put(&self.enc_bias);
        let init_proj = put(&self.init_proj);
        let init_bias = put(&self.init_bias);
        let embedding = put(&self.embedding);
        let gru = self.gru.register(tape, trainable);
        let attn = self.attn.register(tape, trainable);
        let out_proj = if trainable { tape.param(self.out_proj.clone()) } else { tape.constant(self.out_proj.clone()) };
        let out_bias = if trainable { tape.param(self.out_bias.clone()) } else { tape.constant(self.out_bias.clone()) };
        CaptionerVars { enc_proj, enc_bias, init_proj, init_bias, embedding, gru, attn, out_proj, out_bias }
    }

    /// Teacher-forced negative log-likelihood of `target`.
    pub fn caption_nll(&self, grid: &FeatureGrid, target: &Caption) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let loss = caption_nll(&mut tape, grid, target, &vars)?;
        Ok(tape.value(loss).item())
    }

    /// Loss together with its gradient for every block, in block order.
    pub fn loss_and_grads(&self, grid: &FeatureGrid, target: &Caption) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, true);
        let loss = caption_nll(&mut tape, grid, target, &vars)?;
        tape.backward(loss)?;
        let grads = vars.all().iter().map(|v| tape.grad(*v).expect("param gradient").to_vec()).collect();
        Ok((tape.value(loss).item(), grads))
    }

    /// Greedy decoding from `<start>`; stops after `<end>` or `max_len`
    /// tokens. Ties go to the lower index.
    pub fn generate(&self, grid: &FeatureGrid, max_len: usize) -> Result<Generation> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let enc = encode(&mut tape, grid, &vars)?;
        let mut state = enc.h0;
        let mut prev = START;
        let mut out = Generation { tokens: Vec::new(), attention: Vec::new() };
        while out.tokens.len() < max_len {
            let step = decode_step(&mut tape, prev, state, &enc, &vars)?;
            let logits = tape.value(step.logits).data();
            let mut best = 0;
            for (i, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = i;
                }
            }
            out.tokens.push(best);
            out.attention.push(tape.value(step.weights).data().to_vec());
            state = step.state;
            prev = best;
            if best == END {
                break;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CaptionerVars {
    pub enc_proj: Var,
    pub enc_bias: Var,
    pub init_proj: Var,
    pub init_bias: Var,
    pub embedding: Var,
    pub gru: GruVars,
    pub attn: AttentionVars,
    pub out_proj: Var,
    pub out_bias: Var,
}

impl CaptionerVars {
    /// Handles in [`block_names`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.enc_proj, self.enc_bias, self.init_proj, self.init_bias, self.embedding];
        v.extend(self.gru.all());
        v.extend([self.attn.w_s, self.attn.w_h, self.attn.v, self.out_proj, self.out_bias]);
        v
    }

    /// Inverse of [`all`](Self::all).
    pub fn from_slice(v: &[Var]) -> Self {
        CaptionerVars {
            enc_proj: v[0],
            enc_bias: v[1],
            init_proj: v[2],
            init_bias: v[3],
            embedding: v[4],
            gru: GruVars {
                w_z: v[5],
                w_r: v[6],
                w_h: v[7],
                u_z: v[8],
                u_r: v[9],
                u_h: v[10],
                b_z: v[11],
                b_r: v[12],
                b_h: v[13],
            },
            attn: AttentionVars { w_s: v[14], w_h: v[15], v: v[16] },
            out_proj: v[17],
            out_bias: v[18],
        }
    }
}

/// Projected annotation vectors, their attention keys and the decoder's
/// initial state.
#[derive(Clone, Copy, Debug)]
pub struct Encoding {
    pub annotations: Var,
    pub keys: Var,
    pub h0: Var,
}

pub fn encode(tape: &mut Tape, grid: &FeatureGrid, p: &CaptionerVars) -> Result<Encoding> {
    let d = tape.shape(p.enc_proj)[1];
    if grid.depth() != d {
        return Err(Error::dim("encode", format!("grid depth {} but encoder expects {d}", grid.depth())));
    }
    let raw = tape.constant(grid.annotations());
    let proj_t = tape.transpose(p.enc_proj)?;
    let projected = tape.matmul(raw, proj_t)?;
    let projected = tape.add(projected, p.enc_bias)?;
    let annotations = tape.relu(projected);
    let t = grid.positions();
    let averager = tape.constant(Tensor::full(&[t], 1.0 / t as f64));
    let mean = tape.matmul(averager, annotations)?;
    let pre = tape.matmul(p.init_proj, mean)?;
    let pre = tape.add(pre, p.init_bias)?;
    let h0 = tape.tanh(pre);
    let keys = project_keys(tape, annotations, &p.attn)?;
    Ok(Encoding { annotations, keys, h0 })
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeStep {
    pub logits: Var,
    pub log_probs: Var,
    pub state: Var,
    pub weights: Var,
}

/// One decoder step: attend with the previous state, feed
/// `[embedding(y_prev); context]` to the GRU, project to vocabulary logits.
pub fn decode_step(tape: &mut Tape, y_prev: usize, s_prev: Var, enc: &Encoding, p: &CaptionerVars) -> Result<DecodeStep> {
    let k = tape.shape(p.embedding)[0];
    if y_prev >= k {
        return Err(Error::contract(format!("previous word {y_prev} out of range for vocabulary of {k}")));
    }
    let att = attend_with_keys(tape, s_prev, enc.annotations, enc.keys, &p.attn)?;
    let row = tape.gather_rows(p.embedding, &[y_prev])?;
    let e = tape.shape(p.embedding)[1];
    let word = tape.reshape(row, &[e])?;
    let x = tape.concat(&[word, att.context], 0)?;
    let step = gru_step(tape, x, s_prev, &p.gru)?;
    let logits = tape.matmul(p.out_proj, step.h)?;
    let logits = tape.add(logits, p.out_bias)?;
    let log_probs = tape.log_softmax_axis(logits, 0)?;
    Ok(DecodeStep { logits, log_probs, state: step.h, weights: att.weights })
}

/// Position of `<end>` in a caption of the form
/// `<start> w… <end> <pad>…`.
pub fn target_end(target: &Caption) -> Result<usize> {
    let t = &target.tokens;
    let malformed = || Error::contract(format!("malformed caption {t:?}"));
    if t.first() != Some(&START) {
        return Err(malformed());
    }
    let end = t.iter().position(|&x| x == END).ok_or_else(malformed)?;
    if t[1..end].iter().any(|&x| x == START || x == PAD) || t[end + 1..].iter().any(|&x| x != PAD) {
        return Err(malformed());
    }
    Ok(end)
}

/// Teacher-forced summed negative log-likelihood on `tape`; trailing
/// `<pad>` positions are masked out.
pub fn caption_nll(tape: &mut Tape, grid: &FeatureGrid, target: &Caption, p: &CaptionerVars) -> Result<Var> {
    let end = target_end(target)?;
    let k = tape.shape(p.embedding)[0];
    if let Some(bad) = target.tokens.iter().find(|&&x| x >= k) {
        return Err(Error::contract(format!("token {bad} out of range for vocabulary of {k}")));
    }
    let enc = encode(tape, grid, p)?;
    let mut state = enc.h0;
    let mut picked = Vec::with_capacity(end);
    for t in 1..=end {
        let step = decode_step(tape, target.tokens[t - 1], state, &enc, p)?;
        picked.push(tape.select(step.log_probs, &[target.tokens[t]])?);
        state = step.state;
    }
    let all = tape.concat(&picked, 0)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, -1.0))
}

/// Greedy decoder output: emitted tokens (without the leading `<start>`)
/// and the attention weights used at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub attention: Vec<Vec<f64>>,
}

impl Generation {
    pub fn to_caption(&self) -> Caption {
        let mut tokens = vec![START];
        tokens.extend(&self.tokens);
        Caption::new(tokens)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::text::UNK;

    fn tiny_dims() -> CaptionerDims {
        CaptionerDims { feature_dim: 4, enc_dim: 3, dec_dim: 4, embed_dim: 3, attn_dim: 4, vocab_size: 5 }
    }

    fn random_grid(rows: usize, cols: usize, depth: usize, rng: &mut ChaCha8Rng) -> FeatureGrid {
        FeatureGrid::new(rows, cols, depth, Tensor::uniform(&[rows * cols * depth], 2.0, rng).into_data()).unwrap()
    }

    fn randomize(p: &mut CaptionerParams, rng: &mut ChaCha8Rng, scale: f64) {
        for b in p.blocks_mut() {
            let shape = b.shape().to_vec();
            *b = Tensor::uniform(&shape, scale, rng);
        }
    }

    #[test]
    fn feature_grid_checks() {
        assert!(FeatureGrid::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(FeatureGrid::new(0, 2, 3, vec![]).is_err());
        assert!(FeatureGrid::new(1, 1, 1, vec![f64::NAN]).is_err());
        let g = FeatureGrid::new(2, 3, 2, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(g.cell(1, 2), &[10.0, 11.0]);
        assert_eq!(g.annotations().shape(), &[6, 2]);
    }

    #[test]
    fn zero_grid_encodes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CaptionerParams::init(tiny_dims(), &mut rng);
        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let enc = encode(&mut t, &FeatureGrid::zeros(2, 2, 4), &vars).unwrap();
        assert!(t.value(enc.annotations).data().iter().all(|v| *v == 0.0));
        assert!(t.value(enc.h0).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_cell_grid_h0() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = CaptionerParams::init(tiny_dims(), &mut rng);
        p.enc_bias = Tensor::uniform(&[3], 0.5, &mut rng);
        p.init_bias = Tensor::uniform(&[4], 0.5, &mut rng);
        let grid = random_grid(1, 1, 4, &mut rng);
        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let enc = encode(&mut t, &grid, &vars).unwrap();
        let e1 = t.value(enc.annotations).data().to_vec();
        for i in 0..4 {
            let pre: f64 = (0..3).map(|j| p.init_proj.row(i)[j] * e1[j]).sum::<f64>() + p.init_bias.data()[i];
            assert!((t.value(enc.h0).data()[i] - pre.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn encoder_row_by_hand() {
        let mut p = CaptionerParams::zeros(tiny_dims());
        p.enc_proj = Tensor::from_rows(&[
            vec![1.0, 0.0, -1.0, 0.5],
            vec![0.0, 2.0, 0.0, 0.0],
            vec![-1.0, -1.0, -1.0, -1.0],
        ])
        .unwrap();
        p.enc_bias = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let values = vec![
            0.5, -1.0, 0.25, 2.0, // cell (0,0)
            1.0, 1.0, 1.0, 1.0, //
            -0.5, 0.5, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        let grid = FeatureGrid::new(2, 2, 4, values).unwrap();
        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let enc = encode(&mut t, &grid, &vars).unwrap();
        // row 0: [0.5 - 0.25 + 1.0 + 0.1, -2.0 - 0.2, -(1.75) + 0.3] -> relu
        let want = [1.35, 0.0, 0.0];
        for (a, b) in t.value(enc.annotations).row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(encode(&mut t, &FeatureGrid::zeros(2, 2, 5), &vars).is_err());
    }

    #[test]
    fn zero_params_give_uniform_next_word() {
        let p = CaptionerParams::zeros(tiny_dims());
        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = encode(&mut t, &random_grid(2, 1, 4, &mut rng), &vars).unwrap();
        let step = decode_step(&mut t, START, enc.h0, &enc, &vars).unwrap();
        for lp in t.value(step.log_probs).data() {
            assert!((lp.exp() - 0.2).abs() < 1e-15);
        }
        let w = t.value(step.weights).data();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(decode_step(&mut t, 5, enc.h0, &enc, &vars), Err(Error::Contract(_))));
    }

    #[test]
    fn one_step_by_hand() {
        // K=5, T=2, with every dimension at 1 or 2 so the chain can be
        // evaluated by hand.
        let d = CaptionerDims { feature_dim: 1, enc_dim: 1, dec_dim: 1, embed_dim: 1, attn_dim: 1, vocab_size: 5 };
        let mut p = CaptionerParams::zeros(d);
        p.enc_proj = Tensor::from_rows(&[vec![1.0]]).unwrap();
        p.init_proj = Tensor::from_rows(&[vec![0.5]]).unwrap();
        p.embedding = Tensor::from_rows(&[vec![0.0], vec![0.3], vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        p.attn.w_s = Tensor::from_rows(&[vec![1.0]]).unwrap();
        p.attn.w_h = Tensor::from_rows(&[vec![1.0]]).unwrap();
        p.attn.v = Tensor::vector(vec![2.0]);
        p.gru.w_z = Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap();
        p.gru.w_r = Tensor::from_rows(&[vec![-0.3, 0.4]]).unwrap();
        p.gru.w_h = Tensor::from_rows(&[vec![0.7, -0.6]]).unwrap();
        p.gru.u_z = Tensor::from_rows(&[vec![0.2]]).unwrap();
        p.gru.u_r = Tensor::from_rows(&[vec![0.1]]).unwrap();
        p.gru.u_h = Tensor::from_rows(&[vec![-0.5]]).unwrap();
        p.out_proj = Tensor::from_rows(&[vec![1.0], vec![-1.0], vec![2.0], vec![0.0], vec![0.5]]).unwrap();
        p.out_bias = Tensor::vector(vec![0.0, 0.1, 0.0, 0.0, -0.1]);
        let grid = FeatureGrid::new(2, 1, 1, vec![0.4, 1.2]).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let h0 = (0.5f64 * 0.8).tanh();
        let e: Vec<f64> = [0.4f64, 1.2].iter().map(|hj| 2.0 * (h0 + hj).tanh()).collect();
        let z_ = e[0].exp() + e[1].exp();
        let a = [e[0].exp() / z_, e[1].exp() / z_];
        let c = a[0] * 0.4 + a[1] * 1.2;
        let x = [0.3, c];
        let z = sig(0.1 * x[0] + 0.2 * x[1] + 0.2 * h0);
        let r = sig(-0.3 * x[0] + 0.4 * x[1] + 0.1 * h0);
        let cand = (0.7 * x[0] - 0.6 * x[1] + r * (-0.5 * h0)).tanh();
        let h1 = z * cand + (1.0 - z) * h0;
        let logits = [h1, -h1 + 0.1, 2.0 * h1, 0.0, 0.5 * h1 - 0.1];

        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let enc = encode(&mut t, &grid, &vars).unwrap();
        let step = decode_step(&mut t, START, enc.h0, &enc, &vars).unwrap();
        for (got, want) in t.value(step.logits).data().iter().zip(logits) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn uniform_loss_is_length_times_log_k() {
        let p = CaptionerParams::zeros(tiny_dims());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = random_grid(2, 2, 4, &mut rng);
        let cap = Caption::new(vec![START, 4, UNK, 4, END]);
        let loss = p.caption_nll(&grid, &cap).unwrap();
        assert_eq!(loss, 4.0 * 5f64.ln());
        let padded = Caption::new(vec![START, 4, UNK, 4, END, PAD, PAD]);
        assert_eq!(p.caption_nll(&grid, &padded).unwrap(), loss);
    }

    #[test]
    fn malformed_captions_are_rejected() {
        let p = CaptionerParams::zeros(tiny_dims());
        let grid = FeatureGrid::zeros(1, 1, 4);
        for bad in [vec![4, END], vec![START, 4], vec![START, PAD, END], vec![START, END, 4], vec![START, 9, END]] {
            assert!(matches!(p.caption_nll(&grid, &Caption::new(bad)), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn output_bias_shift_leaves_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = CaptionerParams::init(tiny_dims(), &mut rng);
        let grid = random_grid(2, 2, 4, &mut rng);
        let cap = Caption::new(vec![START, 3, 4, END]);
        let base = p.caption_nll(&grid, &cap).unwrap();
        let mut shifted = p.clone();
        shifted.out_bias.data_mut().iter_mut().for_each(|b| *b += 3.7);
        assert!((shifted.caption_nll(&grid, &cap).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn loss_equals_manual_step_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = CaptionerParams::init(tiny_dims(), &mut rng);
        randomize(&mut p, &mut rng, 1.0);
        let grid = random_grid(2, 2, 4, &mut rng);
        let cap = Caption::new(vec![START, 3, 4, 4, END]);

        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let enc = encode(&mut t, &grid, &vars).unwrap();
        let mut state = enc.h0;
        let mut total = 0.0;
        for w in cap.tokens.windows(2) {
            let step = decode_step(&mut t, w[0], state, &enc, &vars).unwrap();
            total += t.value(step.log_probs).data()[w[1]];
            state = step.state;
        }
        assert_eq!((-total).to_bits(), p.caption_nll(&grid, &cap).unwrap().to_bits());
    }

    #[test]
    fn full_model_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(60 + seed);
            let mut p = CaptionerParams::init(tiny_dims(), &mut rng);
            randomize(&mut p, &mut rng, 1.0);
            let grid = random_grid(2, 2, 4, &mut rng);
            let cap = Caption::new(vec![START, 4, END]);
            let inputs: Vec<Tensor> = p.named_blocks().into_iter().map(|(_, t)| t.clone()).collect();
            let r = check_gradients(&inputs, 1e-5, |t, v| caption_nll(t, &grid, &cap, &CaptionerVars::from_slice(v))).unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?} at {}", block_names()[r.worst.0]);
        }
    }

    #[test]
    fn loss_and_grads_agree_with_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = CaptionerParams::init(tiny_dims(), &mut rng);
        let grid = random_grid(1, 3, 4, &mut rng);
        let cap = Caption::new(vec![START, 4, 3, END]);
        let (loss, grads) = p.loss_and_grads(&grid, &cap).unwrap();
        assert_eq!(loss, p.caption_nll(&grid, &cap).unwrap());
        assert_eq!(grads.len(), block_names().len());
        for ((_, b), g) in p.named_blocks().iter().zip(&grads) {
            assert_eq!(b.numel(), g.len());
        }
    }

    #[test]
    fn zero_params_generate_padding_until_max_len() {
        let p = CaptionerParams::zeros(tiny_dims());
        let g = p.generate(&FeatureGrid::zeros(2, 2, 4), 6).unwrap();
        assert_eq!(g.tokens, vec![PAD; 6]);
        assert_eq!(g.attention.len(), 6);
        assert!(p.generate(&FeatureGrid::zeros(2, 2, 4), 0).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = CaptionerParams::init(tiny_dims(), &mut rng);
        randomize(&mut p, &mut rng, 1.5);
        let grid = random_grid(2, 2, 4, &mut rng);
        let a = p.generate(&grid, 10).unwrap();
        let b = p.generate(&grid, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), a.attention.len());
        for w in &a.attention {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        if let Some(pos) = a.tokens.iter().position(|&t| t == END) {
            assert_eq!(pos, a.tokens.len() - 1);
        }
    }

    #[test]
    fn blocks_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = CaptionerParams::init(tiny_dims(), &mut rng);
        let blocks: Vec<Tensor> = p.named_blocks().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(CaptionerParams::from_blocks(blocks.clone()).unwrap(), p);
        let mut broken = blocks;
        broken[3] = Tensor::zeros(&[7]);
        assert!(CaptionerParams::from_blocks(broken).is_err());
        assert_eq!(p.dims(), tiny_dims());
    }

    #[test]
    fn warm_start_embedding() {
        let p = CaptionerParams::zeros(tiny_dims());
        let table = EmbeddingTable { matrix: Tensor::full(&[5, 3], 0.25) };
        let q = p.clone().with_embedding(&table).unwrap();
        assert_eq!(q.embedding, table.matrix);
        let wrong = EmbeddingTable { matrix: Tensor::zeros(&[5, 4]) };
        assert!(p.with_embedding(&wrong).is_err());
    }
}
