use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "trimot", version, about = "3D multi-object tracking with learned point-patch appearance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration shared by every subcommand.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `tracker.max_age=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario (JSON lines).
    Simulate(SimulateArgs),
    /// Track a detection stream and write KITTI-format trajectories.
    Track(TrackArgs),
    /// Score trajectories against ground truth.
    Eval(EvalArgs),
    /// Train the point-patch encoder.
    Train(TrainArgs),
    /// Check loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare association modes on one scenario.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Overrides `simkit.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emit a named regression fixture instead of a random scenario.
    #[arg(long, value_name = "NAME")]
    pub fixture: Option<String>,
    /// Attach identity-clustered embeddings to every detection.
    #[arg(long, value_enum, default_value_t = SimEmbeddings::Oracle)]
    pub embeddings: SimEmbeddings,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimEmbeddings {
    Oracle,
    None,
}

/// Where per-detection embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbeddingSource {
    /// Run the encoder on a patch synthesized from each box.
    Encoder,
    /// Identity-clustered stand-ins derived from the scenario's object ids.
    Oracle,
    /// Embeddings stored in the scenario file.
    Fixture,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["dets", "scenario"]))]
pub struct TrackArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// KITTI-format detections (17 or 18 fields per row).
    #[arg(long)]
    pub dets: Option<PathBuf>,
    /// Scenario file from `simulate`.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Encoder checkpoint; without one the encoder uses seeded initial weights.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `fixture` for scenarios and `encoder` for detection files.
    #[arg(long, value_enum)]
    pub embeddings: Option<EmbeddingSource>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Ground truth: a scenario file (`.jsonl`) or KITTI label file.
    #[arg(long)]
    pub gt: PathBuf,
    /// KITTI-format trajectories.
    #[arg(long)]
    pub hyp: PathBuf,
    /// Match distance in meters; overrides `moteval.threshold`.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("data").required(true).args(["dataset", "toy"]))]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Tracklet observations with image and text embeddings (JSON lines).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Train on the built-in synthetic dataset (`utcl.toy`).
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Per-epoch loss CSV; defaults to the checkpoint path with `.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["scenario", "fixture"]))]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Named regression fixture.
    #[arg(long, value_name = "NAME")]
    pub fixture: Option<String>,
    /// Comma-separated association modes.
    #[arg(long, value_delimiter = ',', default_value = "utr,utr+fgc,utr+cgc,geom-only")]
    pub modes: Vec<String>,
    #[arg(long, value_enum, default_value_t = EmbeddingSource::Fixture)]
    pub embeddings: EmbeddingSource,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write the comparison as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
