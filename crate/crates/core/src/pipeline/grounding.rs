//! Whether attention lands on the object being named, for scenes with known
//! object positions.

use crate::captioner::CaptionerParams;
use crate::error::{Error, Result};
use crate::pipeline::inference::{caption_grid, emitted_words};
use crate::pipeline::synth::{Scene, COLORS, SHAPES};
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Grounding {
    /// Color and shape words emitted.
    pub object_words: usize,
    /// Of those, how many had their attention argmax on the named object.
    pub grounded: usize,
}

impl Grounding {
    pub fn rate(&self) -> f64 {
        if self.object_words == 0 {
            0.0
        } else {
            self.grounded as f64 / self.object_words as f64
        }
    }
}

/// First index of the largest weight.
pub fn argmax(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > weights[best] {
            best = i;
        }
    }
    best
}

/// A color word belongs to the shape that follows it, so the mention index
/// is the number of shape words already emitted.
pub fn score_scene(params: &CaptionerParams, vocab: &Vocabulary, scene: &Scene, max_words: usize) -> Result<Grounding> {
    let grid = scene.features();
    let g = caption_grid(params, &grid, max_words)?;
    let mut out = Grounding::default();
    let mut mentions = 0;
    for (word, alpha) in emitted_words(vocab, &g) {
        let is_shape = SHAPES.contains(&word);
        if !is_shape && !COLORS.contains(&word) {
            continue;
        }
        out.object_words += 1;
        let cell = argmax(alpha);
        if let Some(o) = scene.object_for_word(word, mentions) {
            if o.row * scene.cols + o.col == cell {
                out.grounded += 1;
            }
        }
        if is_shape {
            mentions += 1;
        }
    }
    Ok(out)
}

pub fn score_scenes(params: &CaptionerParams, vocab: &Vocabulary, scenes: &[Scene], max_words: usize) -> Result<Grounding> {
    if scenes.is_empty() {
        return Err(Error::contract("grounding needs at least one scene"));
    }
    let mut total = Grounding::default();
    for s in scenes {
        let g = score_scene(params, vocab, s, max_words)?;
        total.object_words += g.object_words;
        total.grounded += g.grounded;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_of_ties() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
    }

    #[test]
    fn rate_of_nothing_is_zero() {
        assert_eq!(Grounding::default().rate(), 0.0);
        assert_eq!(Grounding { object_words: 4, grounded: 3 }.rate(), 0.75);
    }
}
