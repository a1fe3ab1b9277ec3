use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ats", version, about = "Adaptive token sampling on a toy vision transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shape dataset and cache it as a blob.
    GenData(GenDataArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a model with sampling stages active.
    Finetune(FinetuneArgs),
    /// Accuracy, MAC statistics and K' histograms on the validation split.
    Eval(EvalArgs),
    /// Accuracy and mean MACs over budgets, policies and scoring variants.
    Sweep(SweepArgs),
    /// Per-block token retention masks as PGM plus trace JSON.
    Masks(MasksArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds model initialisation, batch order and stochastic sampling
    /// (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, required = true)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset blob written by `gen-data`; generated on the fly otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AtsArgs {
    /// Comma-separated block indices, e.g. `2,3,4,5`. Empty disables sampling.
    #[arg(long)]
    pub ats_stages: Option<String>,
    /// Per-stage token budget K (defaults to the number of patches).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_parser = ["inverse", "topk", "random"])]
    pub policy: Option<String>,
    #[arg(long, value_parser = ["cls-vnorm", "cls", "rowsum", "random-token"])]
    pub scoring: Option<String>,
    #[arg(long, value_parser = ["ceil", "nearest"])]
    pub inverse_rule: Option<String>,
    /// Choose the largest K whose mean MACs on the validation split stay
    /// within this fraction of the dense model.
    #[arg(long)]
    pub mac_fraction: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainingArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Metric log path; defaults to the weight path with `.csv` appended.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub ats: AtsArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Pretrained weight file.
    #[arg(long, required = true)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub ats: AtsArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, required = true)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub ats: AtsArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, required = true)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Sampling stages used for every row (default `2,3,4,5` capped by depth).
    #[arg(long)]
    pub ats_stages: Option<String>,
    /// Comma-separated budgets (default 1..=N).
    #[arg(long)]
    pub ks: Option<String>,
    /// Comma-separated MAC fractions, each resolved to a budget per row
    /// group. Replaces `--ks`.
    #[arg(long, conflicts_with = "ks")]
    pub mac_fractions: Option<String>,
    #[arg(long, default_value = "inverse,topk")]
    pub policies: String,
    #[arg(long, default_value = "cls-vnorm")]
    pub scorings: String,
    #[arg(long, value_parser = ["ceil", "nearest"], default_value = "ceil")]
    pub inverse_rule: String,
}

#[derive(Debug, Args)]
pub struct MasksArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, required = true)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub ats: AtsArgs,
    /// PGM inputs; when absent the first `--count` validation images are used.
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
}
