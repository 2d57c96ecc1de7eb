//! `attncap` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attncap::captioner::FeatureGrid;
use attncap::embed::{context_pairs, SkipGramParams, DEFAULT_WINDOW};
use attncap::error::Error;
use attncap::gradcheck::{run_suite, SUITE_STENCIL};
use attncap::metrics::{self, EvalInstance};
use attncap::pipeline::checkpoint::Checkpoint;
use attncap::pipeline::config::TrainConfig;
use attncap::pipeline::features;
use attncap::pipeline::inference::{caption_grid, candidates_jsonl, evaluate_split, write_heatmaps};
use attncap::pipeline::manifest::{DatasetManifest, Split};
use attncap::pipeline::synth::{synth_dataset, SynthOptions, MANIFEST_FILE};
use attncap::pipeline::train::{build_vocabulary, train, CHECKPOINT_FILE, VOCAB_FILE};
use attncap::text::{normalize_tokenize, Vocabulary};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EMBEDDING_FILE: &str = "embedding.bin";
const CANDIDATES_FILE: &str = "candidates.jsonl";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "attncap", version, about = "Attention-based image captioning on feature grids")]
struct Cli {
    /// Training configuration (JSON object).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for generated artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Synth(SynthArgs),
    /// Build the vocabulary from a manifest's training captions.
    Vocab(VocabArgs),
    /// Train skip-gram word embeddings on the training captions.
    EmbedTrain(EmbedArgs),
    /// Train the captioner.
    Train(TrainArgs),
    /// Caption one image, given its manifest id or a feature file.
    Caption(CaptionArgs),
    /// Score captions and print the report as JSON.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Total number of scenes.
    #[arg(long)]
    n: usize,
    /// Scenes held out for testing; a tenth of `n` by default.
    #[arg(long)]
    test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
}

#[derive(Debug, Args)]
struct VocabArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Vocabulary to index words with; built from the manifest when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Defaults to checkpoint.ckpt in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to vocab.tsv in the output directory.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CaptionArgs {
    /// Manifest id or path to a feature file.
    target: String,
    #[command(flatten)]
    model: ModelArgs,
    /// Needed to look up image ids.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write one heatmap per generated word into this directory.
    #[arg(long, value_name = "DIR")]
    heatmaps: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Candidate/reference pairs as JSON lines.
    #[arg(long, conflicts_with = "manifest")]
    input: Option<PathBuf>,
    /// Caption a manifest split with a trained model instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    #[command(flatten)]
    model: ModelArgs,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("see `attncap --help`");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Numeric(_)) { 3 } else { 2 })
        }
    }
}

struct Context {
    cfg: TrainConfig,
    out_dir: Option<PathBuf>,
}

impl Context {
    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn model(&self, args: &ModelArgs) -> Result<(attncap::captioner::CaptionerParams, Vocabulary), Error> {
        let dir = self.out_dir();
        let ckpt = args.checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
        let vocab = args.vocab.clone().unwrap_or_else(|| dir.join(VOCAB_FILE));
        let params = Checkpoint::load(&ckpt)?.params;
        let vocab = Vocabulary::load(&vocab)?;
        if vocab.len() != params.dims().vocab_size {
            return Err(Error::Contract(format!(
                "vocabulary has {} words but the checkpoint expects {}",
                vocab.len(),
                params.dims().vocab_size
            )));
        }
        Ok((params, vocab))
    }
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    let ctx = Context { cfg, out_dir: cli.out_dir };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Vocab(a) => vocab(&ctx, a),
        Command::EmbedTrain(a) => embed_train(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Caption(a) => caption(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Gradcheck => gradcheck(&ctx),
    }
}

fn synth(ctx: &Context, a: SynthArgs) -> Outcome {
    let test = a.test.unwrap_or(a.n / 10);
    if a.n == 0 || test + a.val > a.n {
        return Err(Failure::Usage(format!("cannot split {} scenes into {test} test and {} val", a.n, a.val)));
    }
    let opts = SynthOptions { train: a.n - test - a.val, val: a.val, test, rows: a.rows, cols: a.cols, seed: ctx.cfg.seed };
    let dir = ctx.out_dir();
    let manifest = synth_dataset(&dir, &opts)?;
    println!("wrote {} scenes to {}", manifest.entries.len(), dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn vocab(ctx: &Context, a: VocabArgs) -> Outcome {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let v = build_vocabulary(&manifest, ctx.cfg.min_count)?;
    let dir = ctx.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join(VOCAB_FILE);
    v.save(&path)?;
    println!("{} words written to {}", v.len(), path.display());
    Ok(())
}

fn embed_train(ctx: &Context, a: EmbedArgs) -> Outcome {
    if a.steps == 0 || a.window == 0 || !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(Failure::Usage("steps, window and lr must be positive".into()));
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let v = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => build_vocabulary(&manifest, ctx.cfg.min_count)?,
    };
    let corpus: Vec<Vec<usize>> = manifest
        .split(Split::Train)
        .flat_map(|e| &e.captions)
        .map(|c| normalize_tokenize(c).iter().filter_map(|w| v.index_of(w)).collect())
        .collect();
    let pairs = context_pairs(&corpus, a.window);
    if pairs.is_empty() {
        return Err(Error::Contract("training captions yield no context pairs".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let mut sg = SkipGramParams::init(v.len(), ctx.cfg.embed_dim, a.window, &mut rng);
    let losses = sg.train(&pairs, a.steps, a.lr)?;
    let dir = ctx.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join(EMBEDDING_FILE);
    sg.export_table().save(&path)?;
    println!(
        "{} pairs, loss {:.4} -> {:.4} (uniform {:.4}); table written to {}",
        pairs.len(),
        losses[0],
        losses[losses.len() - 1],
        (v.len() as f64).ln(),
        path.display()
    );
    Ok(())
}

fn train_cmd(ctx: &Context, a: TrainArgs) -> Outcome {
    let manifest = DatasetManifest::load(&a.manifest)?;
    manifest.validate_files()?;
    let summary = train(&manifest, &ctx.cfg, &ctx.out_dir(), a.resume)?;
    for (epoch, loss) in &summary.losses {
        println!("epoch {epoch}: mean loss {loss:.6}");
    }
    println!("checkpoint: {}", summary.checkpoint.display());
    Ok(())
}

fn caption(ctx: &Context, a: CaptionArgs) -> Outcome {
    let (params, vocab) = ctx.model(&a.model)?;
    let as_path = Path::new(&a.target);
    let (id, grid): (String, FeatureGrid) = if as_path.is_file() {
        let stem = as_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_owned();
        (stem, features::load(as_path)?)
    } else {
        let Some(mpath) = &a.manifest else {
            return Err(Failure::Usage(format!("{} is not a file; pass --manifest to look it up as an id", a.target)));
        };
        let manifest = DatasetManifest::load(mpath)?;
        let entry = manifest
            .get(&a.target)
            .ok_or_else(|| Error::Contract(format!("no entry {} in {}", a.target, mpath.display())))?;
        (entry.id.clone(), manifest.load_features(entry)?)
    };
    let g = caption_grid(&params, &grid, ctx.cfg.max_caption_len)?;
    println!("{}", vocab.decode(&g.tokens));
    if let Some(dir) = &a.heatmaps {
        let names = write_heatmaps(&vocab, &g, &grid, &id, dir)?;
        eprintln!("{} heatmaps written to {}", names.len(), dir.display());
    }
    Ok(())
}

fn evaluate(ctx: &Context, a: EvaluateArgs) -> Outcome {
    let report = match (&a.input, &a.manifest) {
        (Some(input), None) => {
            let corpus: Vec<EvalInstance> = metrics::load_jsonl(input)?.into_iter().map(|(_, i)| i).collect();
            metrics::score_corpus(&corpus)?
        }
        (None, Some(mpath)) => {
            let (params, vocab) = ctx.model(&a.model)?;
            let manifest = DatasetManifest::load(mpath)?;
            let (report, caps) = evaluate_split(&params, &vocab, &manifest, a.split, ctx.cfg.max_caption_len)?;
            if let Some(dir) = &ctx.out_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                let path = dir.join(CANDIDATES_FILE);
                std::fs::write(&path, candidates_jsonl(&caps)).map_err(|e| Error::Io { path, source: e })?;
            }
            report
        }
        _ => return Err(Failure::Usage("evaluate needs either --input or --manifest".into())),
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn gradcheck(ctx: &Context) -> Outcome {
    let cases = run_suite(ctx.cfg.seed, SUITE_STENCIL)?;
    let mut worst = 0.0f64;
    for c in &cases {
        println!("{:<16} {:.3e} ({} entries)", c.name, c.check.max_rel_err, c.check.checked);
        if c.check.max_rel_err.is_nan() || c.check.max_rel_err > worst {
            worst = c.check.max_rel_err;
        }
    }
    println!("max relative error: {worst:.3e}");
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check exceeded {GRADCHECK_TOLERANCE:e}")).into())
    }
}
