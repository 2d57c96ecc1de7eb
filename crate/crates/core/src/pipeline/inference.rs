//! Captioning and scoring with a trained model.

use std::path::Path;

use crate::captioner::{CaptionerParams, FeatureGrid, Generation};
use crate::error::{Error, Result};
use crate::metrics::{score_corpus, EvalInstance, ScoreReport};
use crate::pipeline::heatmap::{export_heatmap, heatmap_file_name};
use crate::pipeline::manifest::{DatasetManifest, Split};
use crate::text::Vocabulary;

/// Greedy caption with room for `max_words` words plus `<end>`.
pub fn caption_grid(params: &CaptionerParams, grid: &FeatureGrid, max_words: usize) -> Result<Generation> {
    params.generate(grid, max_words + 1)
}

/// Generated words paired with their attention maps; `<end>` included.
pub fn emitted_words<'a>(vocab: &'a Vocabulary, g: &'a Generation) -> Vec<(&'a str, &'a [f64])> {
    g.tokens
        .iter()
        .zip(&g.attention)
        .map(|(&t, a)| (vocab.word(t).unwrap_or("<unk>"), a.as_slice()))
        .collect()
}

/// Writes one heatmap per emitted token; returns the file names in order.
pub fn write_heatmaps(
    vocab: &Vocabulary,
    g: &Generation,
    grid: &FeatureGrid,
    id: &str,
    dir: &Path,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (step, (word, alpha)) in emitted_words(vocab, g).into_iter().enumerate() {
        let name = heatmap_file_name(id, step, word);
        export_heatmap(alpha, grid.rows(), grid.cols(), &dir.join(&name))?;
        names.push(name);
    }
    Ok(names)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitCaptions {
    pub ids: Vec<String>,
    pub captions: Vec<String>,
    pub instances: Vec<EvalInstance>,
}

/// Captions every entry of `split` and pairs it with the entry's references.
pub fn caption_split(
    params: &CaptionerParams,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
    split: Split,
    max_words: usize,
) -> Result<SplitCaptions> {
    let mut out = SplitCaptions { ids: Vec::new(), captions: Vec::new(), instances: Vec::new() };
    for entry in manifest.split(split) {
        let grid = manifest.load_features(entry)?;
        let text = vocab.decode(&caption_grid(params, &grid, max_words)?.tokens);
        out.instances.push(EvalInstance::from_raw(&text, &entry.captions)?);
        out.ids.push(entry.id.clone());
        out.captions.push(text);
    }
    if out.ids.is_empty() {
        return Err(Error::contract(format!("split {split} has no entries")));
    }
    Ok(out)
}

pub fn evaluate_split(
    params: &CaptionerParams,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
    split: Split,
    max_words: usize,
) -> Result<(ScoreReport, SplitCaptions)> {
    let caps = caption_split(params, vocab, manifest, split, max_words)?;
    Ok((score_corpus(&caps.instances)?, caps))
}

/// Candidate lines in the evaluation JSONL layout.
pub fn candidates_jsonl(caps: &SplitCaptions) -> String {
    let mut out = String::new();
    for ((id, c), inst) in caps.ids.iter().zip(&caps.captions).zip(&caps.instances) {
        let refs: Vec<String> = inst.references.iter().map(|r| r.join(" ")).collect();
        let line = serde_json::json!({ "id": id, "candidate": c, "references": refs });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}
