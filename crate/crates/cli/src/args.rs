use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Compress prompts and their attachments, and expand them back.
#[derive(Debug, Parser)]
#[command(name = "promptpack", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a prompt plus attachments into a bundle.
    Compress(CompressArgs),
    /// Restore an attachment from a bundle directory.
    Expand(ExpandArgs),
    /// Run the pipeline over a grid of dictionary sizes and n-gram lengths.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Prompt text file.
    #[arg(long)]
    pub prompt: PathBuf,
    /// Attachment file; `.csv` files are treated as tables. Repeatable.
    #[arg(long = "attach")]
    pub attachments: Vec<PathBuf>,
    /// Candidate exemplars, one per line.
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum QuantArg {
    Uniform,
    Kmeans,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RenderArg {
    Reconstructed,
    Codes,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExemplarModeArg {
    Off,
    Random,
    Representative,
}

/// Flags that override fields of the JSON config file.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON pipeline config; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fraction of prompt tokens to keep, in (0, 1].
    #[arg(long)]
    pub budget: Option<f64>,
    /// Absolute prompt token budget (instead of --budget).
    #[arg(long, conflicts_with = "budget")]
    pub max_tokens: Option<usize>,
    /// n-gram length G.
    #[arg(long)]
    pub ngram: Option<usize>,
    /// Dictionary size T.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub min_freq: Option<u64>,
    /// Disable n-gram abbreviation of text attachments.
    #[arg(long)]
    pub no_abbrev: bool,
    #[arg(long, value_enum)]
    pub quant: Option<QuantArg>,
    /// Uniform quantization bit width.
    #[arg(long)]
    pub bits: Option<u32>,
    /// Number of k-means centroids.
    #[arg(long)]
    pub k: Option<usize>,
    /// Maximum reconstruction error; plans the bit width in uniform mode.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, value_enum)]
    pub render: Option<RenderArg>,
    #[arg(long, value_enum)]
    pub exemplar_mode: Option<ExemplarModeArg>,
    #[arg(long)]
    pub exemplar_count: Option<usize>,
    /// Seed for k-means and exemplar selection.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Price table entry used for cost estimates.
    #[arg(long)]
    pub model: Option<String>,
    /// Append each abbreviation legend to the compressed prompt.
    #[arg(long)]
    pub append_dictionary: bool,
    /// Corpus for the frequency model (blank-line separated documents).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory for the bundle; without it the bundle is printed as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    /// Bundle directory written by `compress --out`.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Where to write the restored attachment.
    #[arg(long)]
    pub out: PathBuf,
    /// Attachment to restore; optional when the bundle holds exactly one.
    #[arg(long)]
    pub attachment: Option<String>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dictionary sizes, comma separated.
    #[arg(long = "t", value_delimiter = ',', default_values_t = [2, 3, 4, 5])]
    pub t_grid: Vec<usize>,
    /// n-gram lengths, comma separated.
    #[arg(long = "g", value_delimiter = ',', default_values_t = [2, 3, 4])]
    pub g_grid: Vec<usize>,
}
