//! Synthetic scenes: one or two colored shapes on a small grid, each with a
//! feature grid and templated captions. Object positions are kept so that
//! attention can be checked against ground truth.
//!
//! Feature channels per cell (D = 16):
//! 0..3 shape one-hot, 3..6 color one-hot, 6 occupied, 7 empty,
//! 8..12 row bucket one-hot, 12..16 column bucket one-hot.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::FeatureGrid;
use crate::error::{Error, Result};
use crate::pipeline::features;
use crate::pipeline::manifest::{DatasetManifest, ManifestEntry, Split};

pub const DEPTH: usize = 16;
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const COLORS: [&str; 3] = ["red", "blue", "green"];
const BUCKETS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    pub fn shape_word(&self) -> &'static str {
        SHAPES[self.shape]
    }

    pub fn color_word(&self) -> &'static str {
        COLORS[self.color]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    /// In mention order: upper object first, or left object first on a shared row.
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// One or two objects with distinct looks on distinct cells.
    pub fn random<R: Rng + ?Sized>(id: String, rows: usize, cols: usize, rng: &mut R) -> Self {
        let n = if rows * cols >= 2 { rng.gen_range(1..=2) } else { 1 };
        let mut objects: Vec<SceneObject> = Vec::new();
        while objects.len() < n {
            let o = SceneObject {
                shape: rng.gen_range(0..SHAPES.len()),
                color: rng.gen_range(0..COLORS.len()),
                row: rng.gen_range(0..rows),
                col: rng.gen_range(0..cols),
            };
            let clash = objects
                .iter()
                .any(|p| (p.row, p.col) == (o.row, o.col) || (p.shape, p.color) == (o.shape, o.color));
            if !clash {
                objects.push(o);
            }
        }
        objects.sort_by_key(|o| (o.row, o.col));
        Scene { id, rows, cols, objects }
    }

    pub fn features(&self) -> FeatureGrid {
        let mut values = vec![0.0; self.rows * self.cols * DEPTH];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let cell = &mut values[(r * self.cols + c) * DEPTH..][..DEPTH];
                match self.objects.iter().find(|o| (o.row, o.col) == (r, c)) {
                    Some(o) => {
                        cell[o.shape] = 1.0;
                        cell[3 + o.color] = 1.0;
                        cell[6] = 1.0;
                    }
                    None => cell[7] = 1.0,
                }
                cell[8 + r * BUCKETS / self.rows] = 1.0;
                cell[12 + c * BUCKETS / self.cols] = 1.0;
            }
        }
        FeatureGrid::new(self.rows, self.cols, DEPTH, values).expect("scene grid is well formed")
    }

    /// Canonical caption followed by its paraphrase.
    pub fn captions(&self) -> Vec<String> {
        let phrase = |o: &SceneObject| format!("a {} {}", o.color_word(), o.shape_word());
        let base = match self.objects.as_slice() {
            [a] => phrase(a),
            [a, b] if a.row == b.row => format!("{} to the left of {}", phrase(a), phrase(b)),
            [a, b] => format!("{} above {}", phrase(a), phrase(b)),
            _ => unreachable!("scenes hold one or two objects"),
        };
        vec![base.clone(), format!("there is {base}")]
    }

    /// Cells covered by the object whose shape or color word is `word`,
    /// taking the `mention`-th object first when both would qualify.
    pub fn object_for_word(&self, word: &str, mention: usize) -> Option<&SceneObject> {
        let fits = |o: &&SceneObject| o.shape_word() == word || o.color_word() == word;
        self.objects.get(mention).filter(fits).or_else(|| self.objects.iter().find(fits))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthOptions {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { train: 500, val: 0, test: 50, rows: 4, cols: 4, seed: 1 }
    }
}

pub fn scenes(opts: &SynthOptions) -> Result<Vec<(Scene, Split)>> {
    let total = opts.train + opts.val + opts.test;
    if total == 0 {
        return Err(Error::contract("synth needs at least one scene"));
    }
    if opts.rows == 0 || opts.cols == 0 {
        return Err(Error::contract("synth grid must be nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let width = total.to_string().len().max(4);
    Ok((0..total)
        .map(|i| {
            let split = if i < opts.train {
                Split::Train
            } else if i < opts.train + opts.val {
                Split::Val
            } else {
                Split::Test
            };
            (Scene::random(format!("scene{i:0width$}"), opts.rows, opts.cols, &mut rng), split)
        })
        .collect())
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const FEATURE_DIR: &str = "features";

/// Writes `manifest.jsonl`, `scenes.jsonl` and `features/<id>.fgrd` under `out_dir`.
pub fn synth_dataset(out_dir: &Path, opts: &SynthOptions) -> Result<DatasetManifest> {
    let all = scenes(opts)?;
    let feature_dir = out_dir.join(FEATURE_DIR);
    std::fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let mut entries = Vec::new();
    let mut scene_lines = String::new();
    for (scene, split) in &all {
        let rel = format!("{FEATURE_DIR}/{}.fgrd", scene.id);
        features::save(&scene.features(), &out_dir.join(&rel))?;
        entries.push(ManifestEntry { id: scene.id.clone(), features: rel, captions: scene.captions(), split: *split });
        scene_lines.push_str(&serde_json::to_string(scene).expect("scenes serialize"));
        scene_lines.push('\n');
    }
    let manifest = DatasetManifest::new(entries, out_dir)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    let scenes_path = out_dir.join(SCENES_FILE);
    std::fs::write(&scenes_path, scene_lines).map_err(|e| Error::io(&scenes_path, e))?;
    Ok(manifest)
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("{}:{}", path.display(), n + 1), e.to_string())))
        .collect()
}
