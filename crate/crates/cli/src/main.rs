//! `eegct` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "eegct", version, about = "EEG-ConvTransformer pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every randomized step.
    #[arg(long, env = "CT_SEED", default_value_t = 0, global = true)]
    pub seed: u64,
    /// Directory receiving all outputs.
    #[arg(long, default_value = ".", global = true)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F32, global = true)]
    pub precision: Precision,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic trial set.
    Synth(SynthArgs),
    /// Project trials onto cropped meshes and dump them.
    Project(ProjectArgs),
    /// Cross-validated training of one task.
    Train(TrainArgs),
    /// Evaluate the checkpoints of a training run on their held-out folds.
    Eval(EvalArgs),
    /// Inter-head CKA per validation fold.
    Cka(CkaArgs),
    /// Aggregate run directories into accuracy and CKA tables.
    Report(ReportArgs),
    /// Trial counts per subject, category and exemplar.
    DatasetSummary(DataArgs),
    /// Layer shapes and parameter counts of a variant.
    Arch(ArchArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output trial file, relative to --out-dir.
    #[arg(long, default_value = "synthetic.eegt")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 124)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[arg(long, default_value_t = 10)]
    pub per_exemplar: usize,
    #[arg(long, default_value_t = 1)]
    pub subjects: usize,
    #[arg(long, default_value_t = 10.0)]
    pub snr: f64,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Trial file (labels are read from `<data>.labels.json`).
    #[arg(long)]
    pub data: PathBuf,
    /// Electrode CSV `label,x,y,z`; defaults to `<data>.montage.csv` if present,
    /// else a synthetic cap.
    #[arg(long)]
    pub montage: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Side of the interpolation grid before the border crop.
    #[arg(long, default_value_t = 34)]
    pub grid: usize,
    #[arg(long, default_value = "meshes.eegt")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "slim")]
    pub variant: String,
    /// Head count for a sweep: keeps D, E and F of --variant.
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "6cat")]
    pub task: String,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Defaults to the reference value for the task and variant.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Train only the first N folds of each subject.
    #[arg(long)]
    pub max_folds: Option<usize>,
    /// Apply weight decay outside the adaptive step.
    #[arg(long)]
    pub decoupled_weight_decay: bool,
    /// Folds trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Print the resolved configuration and stop.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Overrides the trial file recorded in the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CkaArgs {
    /// Trained run to analyze; without it, freshly initialized models are used.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub montage: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long)]
    pub max_folds: Option<usize>,
    /// Row cap per fold for the HSIC estimate.
    #[arg(long, default_value_t = eegct::diversity::DEFAULT_SUBSAMPLE_CAP)]
    pub cap: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directories holding `summary.json` and/or `cka_samples.csv`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ArchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 72)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
