use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Seed used when neither `--seed` nor `PROTESTLENS_SEED` is given.
pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "protestlens", version, about = "Protest event identification in news text and images")]
pub struct Cli {
    /// More log output (repeat for debug detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match events to articles, filter, sample negatives and split.
    BuildCorpus(BuildCorpusArgs),
    /// Build a vocabulary from a training split.
    BuildVocab(BuildVocabArgs),
    /// Train the document classifier.
    TrainText(TrainTextArgs),
    /// Train the image classifier.
    TrainImage(TrainImageArgs),
    /// Score a labelled split with a checkpoint.
    Eval(EvalArgs),
    /// Classify documents, one per input line.
    InferText(InferArgs),
    /// Classify images, one path per input line.
    InferImage(InferArgs),
    /// Print a checkpoint's header and tensor table.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Args, serde::Serialize)]
pub struct BuildCorpusArgs {
    /// Event records (CSV with event_id,article_title,year,events_in_article).
    #[arg(long)]
    pub events: PathBuf,
    /// Articles returned by the title search (JSONL).
    #[arg(long)]
    pub articles: PathBuf,
    /// Archive to draw negatives from (JSONL); defaults to --articles.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of negatives to sample.
    #[arg(long, default_value_t = 27_000)]
    pub negatives: i64,
    #[arg(long, env = "PROTESTLENS_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.90)]
    pub fuzzy_threshold: f64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,
    /// Also write vocab.txt with this many tokens from the training split.
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct BuildVocabArgs {
    /// Training split (corpus JSONL).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleArg {
    Constant,
    WarmupLinear,
}

/// Training hyperparameters; architecture comes from the model config file.
#[derive(Debug, Args, serde::Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub weight_decay: Option<f32>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long, env = "PROTESTLENS_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Loss weights for labels 0 and 1, e.g. `1,2.3`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub class_weights: Option<Vec<f32>>,
    /// Validate every N steps (0 = once per epoch).
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Compute per-example gradients on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct TrainTextArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Held-out split scored into report.json after training.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Vocabulary file; built from --train when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Vocabulary budget when building from --train.
    #[arg(long, default_value_t = 30_000)]
    pub vocab_size: usize,
    /// Architecture JSON; the built-in desk configuration when omitted.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct TrainImageArgs {
    /// Label manifest CSV (`path,protest,violence,sign,police`).
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus JSONL for text checkpoints, label manifest CSV for image ones.
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary file for text checkpoints without an embedded one.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest path; defaults to `<out>.manifest.json` when --out is set.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input file, or `-` for standard input.
    #[arg(long, default_value = "-")]
    pub input: PathBuf,
    /// JSONL destination; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Manifest path; defaults to `<output>.manifest.json` when --output is set.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}
