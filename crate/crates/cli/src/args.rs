//! Command-line grammar.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use ovis_core::{Objective, SimilarityMeasure};

#[derive(Debug, Parser)]
#[command(name = "ovis", version, about = "Open-vocabulary visual instance search")]
pub struct Cli {
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with known concept prototypes.
    GenSynth(GenSynthArgs),
    /// Train an encoder on a corpus and save a checkpoint.
    Train(TrainArgs),
    /// Precompute the instance x token score index for one corpus split.
    BuildIndex(BuildIndexArgs),
    /// Run one query, or a file of queries, against an index.
    Search(SearchArgs),
    /// mAP@k and prec@k of a results file against ground truth.
    Eval(EvalArgs),
    /// Per-query decomposition of the AP shortfall.
    AnalyzeErrors(AnalyzeArgs),
    /// Cross-check the files of a corpus against its manifest.
    Validate(ValidateArgs),
    /// Serve the HTTP search API.
    Serve(ServeArgs),
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be >= 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err("must be in (0, 1]".into())
    }
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub concepts: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 400)]
    pub train_images: usize,
    #[arg(long, default_value_t = 100)]
    pub heldout_images: usize,
    /// Feature noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub label_fraction: f64,
    /// Restrict labels to the first N concepts.
    #[arg(long)]
    pub labelled_concepts: Option<usize>,
    /// Probability that an instance is unmentioned clutter.
    #[arg(long, default_value_t = 0.0)]
    pub clutter: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Both,
    Mtp,
    Ilp,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Both => Objective::Both,
            ObjectiveArg::Mtp => Objective::MtpOnly,
            ObjectiveArg::Ilp => Objective::IlpOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory holding manifest.json.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Both)]
    pub objective: ObjectiveArg,
    /// Seeds shuffling and masking.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seeds parameter initialisation.
    #[arg(long, default_value_t = 1)]
    pub model_seed: u64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ffn_dim: usize,
    /// Per-step loss CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory holding manifest.json.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Heldout)]
    pub split: Split,
    /// cosine, dp or ndp.
    #[arg(long, default_value_t = SimilarityMeasure::Cosine)]
    pub measure: SimilarityMeasure,
    /// Index file to write; the vocabulary and image metadata are written
    /// next to it as `<stem>.vocab` and `<stem>.images.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Vocabulary file; defaults to the sidecar next to the index.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Reject the index unless it was built from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Query text.
    #[arg(
        long = "q",
        visible_alias = "query",
        required_unless_present = "queries",
        conflicts_with = "queries"
    )]
    pub q: Option<String>,
    /// File of queries: plain lines, or JSON lines with a "query" field
    /// (ground-truth files work as is). Writes results as JSON lines.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long = "k", default_value_t = 10, value_parser = positive)]
    pub k: usize,
    /// Print the API's JSON body instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Results file for --queries; stdout if absent.
    #[arg(long, requires = "queries")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON lines of `{"query", "hits": [{"image_id", "box"}, ...]}` in rank order.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long = "k", default_value_t = 50, value_parser = positive)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.5, 0.7], value_parser = unit_interval)]
    pub thresholds: Vec<f64>,
    /// Per-query CSV report.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Print the full report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long = "k", default_value_t = 50, value_parser = positive)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    pub threshold: f64,
    /// Threshold under which a box counts as background.
    #[arg(long, default_value_t = ovis_core::eval::LOW_IOU, value_parser = unit_interval)]
    pub low_iou: f64,
    /// One JSON object per query instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Corpus directory holding manifest.json.
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Index file; repeat with indexes of other measures built from the
    /// same checkpoint.
    #[arg(long, required = true)]
    pub index: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Image metadata JSON lines; defaults to the sidecar next to the
    /// first index when present.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory that image media paths are relative to. OVIS_MEDIA_ROOT
    /// takes precedence.
    #[arg(long)]
    pub media_root: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub default_k: usize,
    /// Measure used when a request names none; defaults to the first index.
    #[arg(long)]
    pub default_measure: Option<SimilarityMeasure>,
    /// Allow cross-origin GET requests.
    #[arg(long)]
    pub cors: bool,
}
