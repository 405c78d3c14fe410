use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// RVE surrogate pipeline: datasets, features, training, evaluation.
///
/// Option precedence: command-line flag, then `--config` JSON file, then
/// environment variable, then built-in default.
#[derive(Debug, Parser, Serialize)]
#[command(name = "rvekit", version)]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "RVEKIT_JOBS")]
    pub jobs: Option<usize>,

    /// Root under which default output directories are created.
    #[arg(long, global = true, env = "RVEKIT_OUT_ROOT", default_value = "runs")]
    pub out_root: PathBuf,

    /// JSON object whose keys are long flag names; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Replace an existing output directory.
    #[arg(long, global = true)]
    pub force: bool,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a dataset of RVEs with solved conductivities and features.
    Generate(GenerateArgs),
    /// Homogenize a single RVE.
    Solve(SolveArgs),
    /// Recompute the feature matrix of a dataset.
    Features(ManifestOut),
    /// Fit the 2PCF principal components on the training split.
    FitPca(FitPcaArgs),
    /// Train a surrogate model.
    Train(TrainArgs),
    /// Rank samples by prediction error and predicted spread.
    Mine(MineArgs),
    /// Rank features and sweep subset sizes.
    Select(SelectArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Translation and rotation checks of a trained model.
    PhysicsCheck(PhysicsArgs),
    /// Collect run summaries into one report.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Solve(_) => "solve",
            Command::Features(_) => "features",
            Command::FitPca(_) => "fit-pca",
            Command::Train(_) => "train",
            Command::Mine(_) => "mine",
            Command::Select(_) => "select",
            Command::Eval(_) => "eval",
            Command::PhysicsCheck(_) => "physics-check",
            Command::Report(_) => "report",
        }
    }

    pub fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::Generate(a) => a.out.as_ref(),
            Command::Solve(a) => a.out.as_ref(),
            Command::Features(a) => a.out.as_ref(),
            Command::FitPca(a) => a.io.out.as_ref(),
            Command::Train(a) => a.io.out.as_ref(),
            Command::Mine(a) => a.io.out.as_ref(),
            Command::Select(a) => a.io.out.as_ref(),
            Command::Eval(a) => a.io.out.as_ref(),
            Command::PhysicsCheck(a) => a.io.out.as_ref(),
            Command::Report(a) => a.out.as_ref(),
        }
    }

    /// Seed for stochastic commands, which must provide one.
    pub fn seed(&self) -> Option<Option<u64>> {
        match self {
            Command::Generate(a) => Some(a.seed),
            Command::Train(a) => Some(a.seed),
            Command::Select(a) => Some(a.seed),
            Command::PhysicsCheck(a) => Some(a.seed),
            Command::Solve(a) if a.manifest.is_none() => Some(a.seed),
            _ => None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ManifestOut {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    /// train,val,test,benchmark
    #[arg(long, value_delimiter = ',', default_value = "600,150,150,150")]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    pub contrasts: Vec<f64>,
    #[arg(long)]
    pub no_features: bool,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SolveArgs {
    /// Take the image from this dataset instead of generating one.
    #[arg(long, requires = "index")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    #[arg(long, default_value_t = 5.0)]
    pub contrast: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitPcaArgs {
    #[command(flatten)]
    pub io: ManifestOut,
    #[arg(long, default_value_t = 13)]
    pub components: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub io: ManifestOut,
    /// vol | bnn | conv | inception | hybrid | hybrid-variable
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Periodic translation of half the training images every 10 epochs.
    #[arg(long)]
    pub augment: bool,
    #[arg(long, default_value_t = 20)]
    pub stage2_epochs: usize,
    /// Contrast for fixed-contrast models.
    #[arg(long, default_value_t = 5.0)]
    pub contrast: f64,
    /// Training contrasts of the variable-contrast model (default: all stored).
    #[arg(long, value_delimiter = ',')]
    pub contrasts: Option<Vec<f64>>,
    /// Feature columns for the feature branch (default: all).
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<usize>>,
    /// Variable-contrast model without the image branch.
    #[arg(long)]
    pub no_image_branch: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub io: ManifestOut,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Expected model kind; checked against the checkpoint when given.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Contrasts to evaluate (default: 5, or all stored for variable-contrast models).
    #[arg(long, value_delimiter = ',')]
    pub contrasts: Option<Vec<f64>>,
}

#[derive(Debug, Args, Serialize)]
pub struct MineArgs {
    #[command(flatten)]
    pub io: ManifestOut,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 0.9)]
    pub error_quantile: f64,
    #[arg(long, default_value_t = 0.9)]
    pub sigma_quantile: f64,
    /// Number of images in the gallery.
    #[arg(long, default_value_t = 16)]
    pub top: usize,
    #[arg(long, default_value_t = 0)]
    pub iteration: u32,
    #[arg(long, default_value_t = 5.0)]
    pub contrast: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    pub io: ManifestOut,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Subset sizes (default: 6, 9, ... up to all features).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 5.0)]
    pub contrast: f64,
    /// Rank only, skip the training sweep.
    #[arg(long)]
    pub rank_only: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PhysicsArgs {
    #[command(flatten)]
    pub io: ManifestOut,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 100)]
    pub shifts: usize,
    #[arg(long, default_value_t = 5.0)]
    pub contrast: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Run directories holding a summary.json each.
    #[arg(long, value_delimiter = ',', required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
