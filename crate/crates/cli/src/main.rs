//! `spiralcluster`: simulate, preprocess, featurize, cluster and score
//! spiral-track events from the command line.
//!
//! Exit codes: 0 success, 2 contract violation (including bad arguments),
//! 3 diverged or collapsed training run, 4 I/O or format error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "spiralcluster", version, about = "Unsupervised clustering of spiral particle-track events")]
pub struct Cli {
    /// Base seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Experiment manifest (JSON) for `pipeline` and `stability`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate labelled proton/carbon events as JSON lines.
    Simulate(SimulateArgs),
    /// Rasterize events into log-scaled charge images.
    Preprocess(PreprocessArgs),
    /// Extract stand-in feature vectors from images.
    Features(FeaturesArgs),
    /// Multi-restart k-means on latent vectors.
    Kmeans(KmeansArgs),
    /// Mixture-of-autoencoders clustering.
    #[command(subcommand)]
    Mixae(MixaeCommand),
    /// Score predicted clusters against ground-truth labels.
    Evaluate(EvaluateArgs),
    /// Run a whole experiment from a manifest.
    Pipeline(PipelineArgs),
    /// Run a manifest's clustering stage N times and print the Top-1 / mean ± std table.
    Stability(StabilityArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    pub proton: usize,
    #[arg(long, default_value_t = 500)]
    pub carbon: usize,
    #[arg(long, default_value_t = 0)]
    pub other: usize,
    /// Tesla.
    #[arg(long, default_value_t = 2.0)]
    pub b_field: f64,
    /// Uniformly scattered noise points per event.
    #[arg(long, default_value_t = 0)]
    pub noise_points: usize,
    /// Spurious short arcs per event.
    #[arg(long, default_value_t = 0)]
    pub noise_arcs: usize,
    /// Labels sidecar; defaults to the output path with a `.labels.csv` extension.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    /// Half-width of the imaged pad-plane region, mm.
    #[arg(long, default_value_t = 275.0)]
    pub bounds: f64,
    #[arg(long)]
    pub nn_filter: bool,
    #[arg(long, default_value_t = 10.0)]
    pub nn_radius: f64,
    #[arg(long, default_value_t = 2)]
    pub nn_min_neighbors: usize,
    #[arg(long)]
    pub hough: bool,
    /// Labels sidecar; defaults to the output path with a `.labels.csv` extension.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub out_dim: usize,
    /// Project onto this many principal components after extraction.
    #[arg(long)]
    pub pca: Option<usize>,
}

#[derive(Args, Debug)]
pub struct KmeansArgs {
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub pca: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Restarts per run; the lowest-inertia restart is kept.
    #[arg(long, default_value_t = 10)]
    pub m_inits: usize,
    #[arg(long, default_value_t = 10)]
    pub n_runs: usize,
    /// Ground truth "id,label" CSV aligned with the latents.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Also write the selected run's assignments as "id,cluster" CSV.
    #[arg(long)]
    pub pred: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Encoder filter counts, comma separated; the decoder mirrors them.
    #[arg(long, value_delimiter = ',', default_value = "16,8")]
    pub filters: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
}

#[derive(Args, Debug, Clone)]
pub struct WeightArgs {
    #[arg(long, default_value_t = 0.1)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e5)]
    pub gamma: f64,
}

#[derive(Subcommand, Debug)]
pub enum MixaeCommand {
    /// Train one model and write its run directory.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        weights: WeightArgs,
    },
    /// Log-scale grid search over the loss weights.
    Grid {
        #[command(flatten)]
        model: ModelArgs,
        /// Grid specification JSON; defaults to whole decades over the standard ranges.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        runs_per_cell: usize,
    },
    /// Train N seeded models and summarise their spread.
    Stability {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        weights: WeightArgs,
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Ground truth "id,label" CSV.
    #[arg(long)]
    pub truth: PathBuf,
    /// Predictions CSV with an id column followed by one or more cluster columns.
    #[arg(long)]
    pub pred: PathBuf,
    /// Cluster column to score; defaults to the first one after the id.
    #[arg(long)]
    pub column: Option<String>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {}

#[derive(Args, Debug)]
pub struct StabilityArgs {
    /// Overrides the manifest's run count.
    #[arg(long)]
    pub runs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
