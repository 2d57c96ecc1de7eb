//! Training configuration, read from a single JSON object. Unknown keys are
//! rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::captioner::CaptionerDims;
use crate::error::{Error, Result};
use crate::text::DEFAULT_MAX_CAPTION_LEN;

/// Largest seed that survives the checkpoint's f64 metadata exactly.
pub const MAX_SEED: u64 = 1 << 53;

pub const DEFAULT_CLIP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_caption_len: usize,
    pub enc_dim: usize,
    pub dec_dim: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    /// Global-norm clipping threshold; off when absent.
    pub grad_clip: Option<f64>,
    /// Minimum word count for the vocabulary built at training time.
    pub min_count: u64,
    /// Optional skip-gram table to initialize the word embeddings.
    pub embedding_file: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 20,
            seed: 1,
            max_caption_len: DEFAULT_MAX_CAPTION_LEN,
            enc_dim: 32,
            dec_dim: 64,
            embed_dim: 32,
            attn_dim: 64,
            grad_clip: None,
            min_count: 1,
            embedding_file: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::contract(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        let sizes = [
            ("batch_size", self.batch_size),
            ("max_caption_len", self.max_caption_len),
            ("enc_dim", self.enc_dim),
            ("dec_dim", self.dec_dim),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::contract(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.seed > MAX_SEED {
            return Err(Error::contract(format!("seed must be at most 2^53, got {}", self.seed)));
        }
        Ok(())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        cfg.validate().map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dims(&self, feature_dim: usize, vocab_size: usize) -> CaptionerDims {
        CaptionerDims {
            feature_dim,
            enc_dim: self.enc_dim,
            dec_dim: self.dec_dim,
            embed_dim: self.embed_dim,
            attn_dim: self.attn_dim,
            vocab_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_json() {
        let d = TrainConfig::default();
        assert_eq!((d.learning_rate, d.beta1, d.beta2, d.epsilon, d.batch_size), (1e-3, 0.9, 0.999, 1e-8, 8));
        assert_eq!(d.grad_clip, None);
        let c = TrainConfig::from_json(r#"{"learning_rate": 0.01, "grad_clip": 5.0}"#, "c").unwrap();
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.grad_clip, Some(DEFAULT_CLIP));
        assert_eq!(c.batch_size, 8);
        let back = TrainConfig::from_json(&c.to_json(), "c").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(TrainConfig::from_json(r#"{"learning_rte": 0.01}"#, "c").is_err());
        assert!(TrainConfig::from_json(r#"{"learning_rate": -1}"#, "c").is_err());
        assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#, "c").is_err());
        assert!(TrainConfig::from_json(r#"{"beta2": 1.0}"#, "c").is_err());
        assert!(TrainConfig::from_json(r#"{"seed": 9007199254740993}"#, "c").is_err());
    }
}
