use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use idl_core::augment::AugmentKind;
use idl_core::corpus::Split;
use idl_core::sampling::Strategy;
use idl_core::train::Profile;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "idl",
    version,
    about = "IDL pre-training, fine-tuning and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (WAV files plus manifest).
    Synth(SynthArgs),
    /// Extract log-mel features for every manifest entry into a feature cache.
    Features(FeaturesArgs),
    /// Pre-train the backbone with the instance-discrimination loss.
    Pretrain(PretrainArgs),
    /// Cluster stage-one embeddings into pseudo-labels for PIS.
    Cluster(ClusterArgs),
    /// Fine-tune depression classifiers on labeled training speakers.
    Finetune(FinetuneArgs),
    /// Score checkpoints on a labeled split and write an evaluation report.
    Eval(EvalArgs),
    /// Speaker-classification probe on frozen embeddings.
    Probe(ProbeArgs),
    /// Write one segment before and after augmentation as feature caches.
    AugmentPreview(AugmentPreviewArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Features(_) => "features",
            Command::Pretrain(_) => "pretrain",
            Command::Cluster(_) => "cluster",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Probe(_) => "probe",
            Command::AugmentPreview(_) => "augment-preview",
        }
    }

    pub fn run_dir(&self) -> Option<&PathBuf> {
        match self {
            Command::Synth(a) => a.run.run_dir.as_ref(),
            Command::Features(a) => a.run.run_dir.as_ref(),
            Command::Pretrain(a) => a.run.run_dir.as_ref(),
            Command::Cluster(a) => a.run.run_dir.as_ref(),
            Command::Finetune(a) => a.run.run_dir.as_ref(),
            Command::Eval(a) => a.run.run_dir.as_ref(),
            Command::Probe(a) => a.run.run_dir.as_ref(),
            Command::AugmentPreview(a) => a.run.run_dir.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    /// Output directory; defaults to `$IDL_RUN_ROOT/<command>` (or `runs/<command>`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

/// Where utterances come from: a manifest and optionally a feature cache.
#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// JSON-lines manifest; relative audio paths resolve against its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature cache written by `features`; features are recomputed when absent.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub speakers: usize,
    #[arg(long)]
    pub utts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Make a labeled corpus with this fraction of depressed speakers.
    #[arg(long)]
    pub depressed_fraction: Option<f64>,
    #[arg(long)]
    pub min_secs: Option<f64>,
    #[arg(long)]
    pub max_secs: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FeaturesArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Batch sampling: rs, ds or pis.
    #[arg(long)]
    pub strategy: Strategy,
    /// Augmentation: tm, fm, specaug, noise, volume or vtlp.
    #[arg(long, default_value = "tm")]
    pub augment: AugmentKind,
    /// Pseudo-label file from `cluster`; required by `--strategy pis`.
    #[arg(long)]
    pub pseudo_labels: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Stage-one checkpoint whose embeddings are clustered.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of clusters; PIS batches draw one segment per cluster.
    #[arg(long, default_value_t = 20)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// a: crop, balance and ensemble five models; b: all segments, one model.
    #[arg(long)]
    pub profile: Profile,
    /// Pre-trained checkpoint; omitted for the baseline without pre-training.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Which epoch each model is kept from.
    #[arg(long, value_enum, default_value_t = Selection::Final)]
    pub select: Selection,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// The last epoch.
    Final,
    /// The epoch with the lowest cross-entropy on the validation speakers.
    BestVal,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Ensemble member checkpoints; repeat the flag for several.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Split to score: train, validation or test.
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Embedding model; a seeded random initialization when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// The checkpoint is a pre-trained backbone rather than a fine-tuned one.
    #[arg(long)]
    pub no_finetune: bool,
    /// Split whose speakers are probed: train, validation or test.
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AugmentPreviewArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub augment: AugmentKind,
    /// Index into the segment pool of all utterances.
    #[arg(long, default_value_t = 0)]
    pub segment: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
