//! Adam with bias correction and optional global-norm clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, clip: None }
    }
}

/// First and second moment buffers, one per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        AdamState { v: m.clone(), m, step: 0 }
    }

    pub fn for_blocks(blocks: &[&Tensor]) -> Self {
        Self::new(blocks.iter().map(|t| t.numel()))
    }

    /// One update. `grads` is clipped in place if configured, then zeroed.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &mut [Vec<f64>], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam expects {} blocks, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.numel() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::contract(format!("adam block {i} has the wrong size")));
            }
        }
        if let Some(c) = cfg.clip {
            let norm = global_norm(grads);
            if norm > c {
                let s = c / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter_mut()).zip(&mut self.m).zip(&mut self.v) {
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter_mut()).zip(m).zip(v) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * *gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * *gi * *gi;
                *x -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.epsilon);
                *gi = 0.0;
            }
        }
        Ok(())
    }
}
