//! Command-line front end for the keypoint segmentation pipeline.

pub mod config;

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use keyseg_core::ingest::View;
use keyseg_core::models::CHECKPOINT_FORMAT_VERSION;
use keyseg_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_REJECTED: i32 = 3;
pub const EXIT_UNRECOVERABLE: i32 = 4;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_CAPABILITY: i32 = 65;
pub const EXIT_NUMERIC: i32 = 70;

/// Maps a pipeline error to the process exit status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::UnrecoverableChannel { .. }
        | Error::EmptyLoss
        | Error::EmptyMetric
        | Error::LabelCoverage(_) => EXIT_UNRECOVERABLE,
        Error::Config(_) => EXIT_USAGE,
        Error::Capability(_) => EXIT_CAPABILITY,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

#[derive(Debug, Parser)]
#[command(name = "keyseg", about = "Segment reach-to-grasp keypoint sequences into sub-actions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assemble per-frame detections and hand landmarks into a sequence CSV.
    Ingest(IngestArgs),
    /// Gate, interpolate and smooth one sequence CSV.
    Refine(RefineArgs),
    /// Generate labelled synthetic sequences.
    Synth(SynthArgs),
    /// Refine and standardize a synthetic (or compatible) manifest into a dataset.
    Build(BuildArgs),
    /// Train one model on a dataset.
    Train(TrainArgs),
    /// Patient-grouped k-fold cross-validation.
    Cv(CvArgs),
    /// Per-frame segment labels for a refined sequence.
    Predict(PredictArgs),
    /// Export attention maps for a refined sequence.
    Attn(AttnArgs),
    /// Draw ground truth and predictions as a timeline SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Object detections, one JSON object per line.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Hand landmarks, one JSON object per line.
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long, default_value = "")]
    pub target_class: String,
    #[arg(long)]
    pub view: View,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to the channel count of the input (22 = contralateral).
    #[arg(long)]
    pub view: Option<View>,
    /// Manifest that receives one row per call; defaults to
    /// `refine_manifest.csv` next to the output.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Sequence id for the manifest; defaults to the input file stem.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `synth.n_sequences`.
    #[arg(long)]
    pub n: Option<usize>,
    /// Overrides `synth.view`.
    #[arg(long)]
    pub view: Option<View>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Manifest written by `synth`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `dataset.csv` written by `build`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Architecture name, e.g. Trans3, LSTM1, Trans3LSTM1.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub view: Option<View>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_model: PathBuf,
    /// Defaults to `<out-model>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub view: Option<View>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Overrides `folds.k`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    /// Refined sequence CSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    /// Refined sequence CSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Ground-truth labels, drawn as boundaries on the heatmap.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Skip the SVG heatmap.
    #[arg(long)]
    pub no_svg: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Refined sequence CSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Predicted labels written by `predict`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth labels.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn version() -> &'static str {
    let s = format!(
        "{} (checkpoint format {CHECKPOINT_FORMAT_VERSION})",
        env!("CARGO_PKG_VERSION")
    );
    Box::leak(s.into_boxed_str())
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status. Messages go to stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().version(version()).try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
