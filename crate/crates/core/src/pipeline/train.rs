//! Mini-batch teacher-forced training with Adam, per-epoch checkpoints and
//! a loss curve, resumable bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::captioner::{CaptionerParams, FeatureGrid};
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::pipeline::adam::{AdamConfig, AdamState};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::manifest::{DatasetManifest, Split};
use crate::text::{normalize_tokenize, Caption, Vocabulary};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_FILE: &str = "run.json";

/// One (image, reference caption) pair; `grid` indexes [`TrainingData::grids`].
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub grid: usize,
    pub caption: Caption,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub ids: Vec<String>,
    pub grids: Vec<FeatureGrid>,
    pub examples: Vec<Example>,
}

impl TrainingData {
    /// Every caption of every entry in `split` becomes one example.
    pub fn from_manifest(manifest: &DatasetManifest, split: Split, vocab: &Vocabulary, max_words: usize) -> Result<Self> {
        let mut data = TrainingData { ids: Vec::new(), grids: Vec::new(), examples: Vec::new() };
        for entry in manifest.split(split) {
            let grid = manifest.load_features(entry)?;
            let g = data.grids.len();
            for c in &entry.captions {
                data.examples.push(Example { grid: g, caption: vocab.encode_truncated(&normalize_tokenize(c), max_words) });
            }
            data.ids.push(entry.id.clone());
            data.grids.push(grid);
        }
        if data.examples.is_empty() {
            return Err(Error::contract(format!("split {split} has no entries")));
        }
        data.feature_dim()?;
        Ok(data)
    }

    /// Channel count shared by every grid.
    pub fn feature_dim(&self) -> Result<usize> {
        let d = self.grids.first().map(FeatureGrid::depth).ok_or_else(|| Error::contract("no feature grids"))?;
        if let Some((i, g)) = self.grids.iter().enumerate().find(|(_, g)| g.depth() != d) {
            return Err(Error::dim("training data", format!("{} has {} channels, expected {d}", self.ids[i], g.depth())));
        }
        Ok(d)
    }

    /// Mean number of next-word predictions per example.
    pub fn mean_prediction_len(&self) -> f64 {
        self.examples.iter().map(|e| e.caption.prediction_len() as f64).sum::<f64>() / self.examples.len() as f64
    }
}

/// Vocabulary over the normalized training captions.
pub fn build_vocabulary(manifest: &DatasetManifest, min_count: u64) -> Result<Vocabulary> {
    let corpus: Vec<Vec<String>> =
        manifest.split(Split::Train).flat_map(|e| e.captions.iter().map(|c| normalize_tokenize(c))).collect();
    Vocabulary::build(&corpus, min_count)
}

/// Example order for one epoch, a pure function of (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn mean_loss(params: &CaptionerParams, data: &TrainingData) -> Result<f64> {
    let mut total = 0.0;
    for ex in &data.examples {
        total += params.caption_nll(&data.grids[ex.grid], &ex.caption)?;
    }
    Ok(total / data.examples.len() as f64)
}

/// Fresh parameters drawn from `cfg.seed`, with the optional embedding warm start.
pub fn initial_params(cfg: &TrainConfig, feature_dim: usize, vocab_size: usize) -> Result<CaptionerParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = CaptionerParams::init(cfg.dims(feature_dim, vocab_size), &mut rng);
    match &cfg.embedding_file {
        Some(path) => params.with_embedding(&EmbeddingTable::load(path)?),
        None => Ok(params),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub params: CaptionerParams,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    /// Epochs completed so far.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(params: CaptionerParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(params.named_blocks().iter().map(|(_, t)| t.numel()));
        Ok(Trainer { params, adam, cfg, epoch: 0 })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ckpt.seed != cfg.seed {
            return Err(Error::contract(format!("checkpoint seed {} differs from configured seed {}", ckpt.seed, cfg.seed)));
        }
        let d = ckpt.params.dims();
        if cfg.dims(d.feature_dim, d.vocab_size) != d {
            return Err(Error::contract("checkpoint dimensions differ from the configuration"));
        }
        Ok(Trainer { params: ckpt.params, adam: ckpt.adam, cfg, epoch: ckpt.epoch })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { params: self.params.clone(), adam: self.adam.clone(), epoch: self.epoch, seed: self.cfg.seed }
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.cfg.learning_rate,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            epsilon: self.cfg.epsilon,
            clip: self.cfg.grad_clip,
        }
    }

    /// One Adam step on the mean loss of `batch`; returns the summed loss.
    pub fn train_batch(&mut self, data: &TrainingData, batch: &[usize], label: &str) -> Result<f64> {
        let mut grads: Vec<Vec<f64>> = self.adam.m.iter().map(|m| vec![0.0; m.len()]).collect();
        let mut total = 0.0;
        for &i in batch {
            let ex = &data.examples[i];
            let (loss, g) = self.params.loss_and_grads(&data.grids[ex.grid], &ex.caption)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in {label} (example {})", data.ids[ex.grid])));
            }
            total += loss;
            for (acc, g) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {label}")));
        }
        let cfg = self.adam_config();
        self.adam.step(&mut self.params.blocks_mut(), &mut grads, &cfg)?;
        Ok(total)
    }

    /// Runs the next epoch and returns its mean per-example loss.
    pub fn run_epoch(&mut self, data: &TrainingData) -> Result<f64> {
        let epoch = self.epoch + 1;
        let order = epoch_order(data.examples.len(), self.cfg.seed, epoch);
        let mut total = 0.0;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            total += self.train_batch(data, batch, &format!("epoch {epoch}, batch {b}"))?;
        }
        self.epoch = epoch;
        Ok(total / data.examples.len() as f64)
    }
}

pub fn loss_csv(rows: &[(u64, f64)]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in rows {
        writeln!(out, "{e},{l}").expect("string write");
    }
    out
}

pub fn parse_loss_csv(text: &str, origin: &str) -> Result<Vec<(u64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,mean_loss") {
        return Err(Error::format(origin, "missing epoch,mean_loss header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let bad = || Error::format(format!("{origin}:{}", n + 2), format!("bad row {l:?}"));
            let (e, v) = l.split_once(',').ok_or_else(bad)?;
            Ok((e.parse().map_err(|_| bad())?, v.parse().map_err(|_| bad())?))
        })
        .collect()
}

#[derive(Serialize)]
struct RunRecord<'a> {
    seed: u64,
    epochs_completed: u64,
    vocab_size: usize,
    param_count: usize,
    training_examples: usize,
    config: &'a TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<(u64, f64)>,
    pub checkpoint: PathBuf,
    pub vocab: Vocabulary,
    pub params: CaptionerParams,
}

/// Trains on the manifest's train split, writing `vocab.tsv`,
/// `checkpoint.ckpt`, `loss.csv` and `run.json` under `out_dir`. Row 0 of
/// the loss curve is the loss before any update. With `resume`, an existing
/// checkpoint is picked up and the curve is cut back to its epoch.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vocab_path = out_dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() {
        Vocabulary::load(&vocab_path)?
    } else {
        let v = build_vocabulary(manifest, cfg.min_count)?;
        v.save(&vocab_path)?;
        v
    };
    let data = TrainingData::from_manifest(manifest, Split::Train, &vocab, cfg.max_caption_len)?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let loss_path = out_dir.join(LOSS_FILE);

    let (mut trainer, mut losses) = if resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let text = std::fs::read_to_string(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
        let mut rows = parse_loss_csv(&text, &loss_path.display().to_string())?;
        rows.retain(|(e, _)| *e <= ckpt.epoch);
        (Trainer::from_checkpoint(ckpt, cfg.clone())?, rows)
    } else {
        let params = initial_params(cfg, data.feature_dim()?, vocab.len())?;
        let baseline = mean_loss(&params, &data)?;
        if !baseline.is_finite() {
            return Err(Error::Numeric("non-finite loss before training".into()));
        }
        let t = Trainer::new(params, cfg.clone())?;
        t.checkpoint().save(&ckpt_path)?;
        (t, vec![(0, baseline)])
    };
    write_file(&loss_path, loss_csv(&losses))?;

    while trainer.epoch < cfg.epochs as u64 {
        let loss = trainer.run_epoch(&data)?;
        losses.push((trainer.epoch, loss));
        trainer.checkpoint().save(&ckpt_path)?;
        write_file(&loss_path, loss_csv(&losses))?;
    }

    let record = RunRecord {
        seed: cfg.seed,
        epochs_completed: trainer.epoch,
        vocab_size: vocab.len(),
        param_count: trainer.params.param_count(),
        training_examples: data.examples.len(),
        config: cfg,
    };
    write_file(&out_dir.join(RUN_FILE), serde_json::to_string_pretty(&record).expect("run record serializes") + "\n")?;
    Ok(TrainSummary { losses, checkpoint: ckpt_path, vocab, params: trainer.params })
}

fn write_file(path: &Path, contents: String) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 9, 1);
        assert_eq!(a, epoch_order(50, 9, 1));
        assert_ne!(a, epoch_order(50, 9, 2));
        assert_ne!(a, epoch_order(50, 10, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn loss_csv_round_trip() {
        let rows = vec![(0, 12.5), (1, 0.1 + 0.2), (2, 1e-7)];
        let text = loss_csv(&rows);
        assert!(text.starts_with("epoch,mean_loss\n0,12.5\n"));
        assert_eq!(parse_loss_csv(&text, "l").unwrap(), rows);
        assert!(parse_loss_csv("e,l\n", "l").is_err());
        assert!(parse_loss_csv("epoch,mean_loss\n1;2\n", "l").is_err());
    }
}
