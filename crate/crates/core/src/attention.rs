//! Additive attention over encoder positions.
//!
//! Scores are `e_j = v · tanh(W_s s + W_h h_j)`, weights are the softmax of
//! the scores over positions, and the context is `Σ_j α_j h_j`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// A×H_dec projection of the decoder state.
    pub w_s: Tensor,
    /// A×H_enc projection of each annotation vector.
    pub w_h: Tensor,
    /// A-vector collapsing the hidden layer to a score.
    pub v: Tensor,
}

impl AttentionParams {
    pub fn zeros(dec: usize, enc: usize, attn: usize) -> Self {
        AttentionParams {
            w_s: Tensor::zeros(&[attn, dec]),
            w_h: Tensor::zeros(&[attn, enc]),
            v: Tensor::zeros(&[attn]),
        }
    }

    /// Uniform(-1/√A, 1/√A) everywhere.
    pub fn init<R: Rng + ?Sized>(dec: usize, enc: usize, attn: usize, rng: &mut R) -> Self {
        let b = 1.0 / (attn as f64).sqrt();
        AttentionParams {
            w_s: Tensor::uniform(&[attn, dec], b, rng),
            w_h: Tensor::uniform(&[attn, enc], b, rng),
            v: Tensor::uniform(&[attn], b, rng),
        }
    }

    pub fn attn_dim(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.attn_dim();
        if self.v.rank() != 1 || self.w_s.rank() != 2 || self.w_h.rank() != 2 {
            return Err(Error::dim("attention params", "w_s, w_h must be matrices and v a vector"));
        }
        if self.w_s.shape()[0] != a || self.w_h.shape()[0] != a {
            return Err(Error::dim(
                "attention params",
                format!("w_s {:?} and w_h {:?} must both project to {a}", self.w_s.shape(), self.w_h.shape()),
            ));
        }
        Ok(())
    }

    pub fn blocks(&self) -> [&Tensor; 3] {
        [&self.w_s, &self.w_h, &self.v]
    }

    pub fn blocks_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_s, &mut self.w_h, &mut self.v]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        let mut put = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        AttentionVars { w_s: put(&self.w_s), w_h: put(&self.w_h), v: put(&self.v) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_s: Var,
    pub w_h: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Raw scores, one per position.
    pub scores: Var,
    /// Softmax of the scores over positions.
    pub weights: Var,
    /// Weighted sum of the annotation vectors.
    pub context: Var,
}

/// `W_h h_j` for every position, as a T×A matrix. It does not depend on the
/// decoder state, so a decoder can compute it once per image.
pub fn project_keys(tape: &mut Tape, enc: Var, p: &AttentionVars) -> Result<Var> {
    if tape.shape(enc).len() != 2 {
        return Err(Error::dim("attend", format!("encoder states must be T×H_enc, got {:?}", tape.shape(enc))));
    }
    if tape.shape(enc)[0] == 0 {
        return Err(Error::contract("attention needs at least one position"));
    }
    let w_h_t = tape.transpose(p.w_h)?;
    tape.matmul(enc, w_h_t)
}

/// Attention with keys already produced by [`project_keys`].
pub fn attend_with_keys(tape: &mut Tape, s_prev: Var, enc: Var, keys: Var, p: &AttentionVars) -> Result<AttentionOutput> {
    let query = tape.matmul(p.w_s, s_prev)?;
    let hidden = tape.add(keys, query)?;
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul(hidden, p.v)?;
    let weights = tape.softmax_axis(scores, 0)?;
    let context = tape.matmul(weights, enc)?;
    Ok(AttentionOutput { scores, weights, context })
}

pub fn attend(tape: &mut Tape, s_prev: Var, enc: Var, p: &AttentionVars) -> Result<AttentionOutput> {
    let keys = project_keys(tape, enc, p)?;
    attend_with_keys(tape, s_prev, enc, keys, p)
}

/// Row-major reshape of T = rows·cols weights into a grid.
pub fn attention_map(weights: &[f64], rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
    if weights.len() != rows * cols {
        return Err(Error::dim(
            "attention_map",
            format!("{} weights cannot fill a {rows}x{cols} grid", weights.len()),
        ));
    }
    Ok(weights.chunks(cols.max(1)).map(<[f64]>::to_vec).collect())
}
