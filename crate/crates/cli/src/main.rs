//! `swinunetr` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Preset;

/// Failure that comes from the numbers (non-finite values, failed checks)
/// rather than from the inputs; exits with code 2.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

#[derive(Parser)]
#[command(name = "swinunetr", version, about = "Swin transformer segmentation of multi-modal MRI volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a headerless raw array into an SVOL volume or mask.
    Convert(ConvertArgs),
    /// Write a synthetic nested-ellipsoid dataset and its manifest.
    Synth(SynthArgs),
    /// Train one model on a manifest fold.
    Train(TrainArgs),
    /// Sliding-window inference with one checkpoint or an ensemble.
    Infer(InferArgs),
    /// Score predicted masks against a manifest.
    Eval(EvalArgs),
    /// Run the built-in gradient, oracle and roundtrip checks.
    Verify(VerifyArgs),
    /// Print level shapes, parameter count and FLOPs of a model config.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
pub struct ConvertArgs {
    /// Raw little-endian input file, laid out [C, H, W, D].
    #[arg(long)]
    pub input: PathBuf,
    /// Destination SVOL file.
    #[arg(long)]
    pub out: PathBuf,
    /// Element type of the raw file (u8, i16, u16, i32, f32, f64).
    #[arg(long, default_value = "f32")]
    pub dtype: String,
    /// Spatial extents H,W,D, or one value for a cube.
    #[arg(long, value_delimiter = ',', required = true)]
    pub shape: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    /// Voxel spacing in millimetres.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 1.0])]
    pub spacing: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub channel_names: Option<Vec<String>>,
    /// Treat the input as a label map (values 0, 1, 2, 4) and write a mask.
    #[arg(long)]
    pub mask: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cases: Option<usize>,
    /// One extent for a cube or H,W,D.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Hold this fold out for validation; without it every case trains.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults for sections the config file leaves out.
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub val_every: Option<usize>,
}

#[derive(Args)]
pub struct InferArgs {
    /// Image volume (SVOL); normalized the same way as in training.
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoints to average, or ensemble description files (.json).
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fraction of the roi shared by neighbouring tiles [default: 0.7].
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Tile extent, one value for a cube or H,W,D [default: 128].
    #[arg(long, value_delimiter = ',')]
    pub roi: Option<Vec<usize>>,
    /// uniform or gaussian [default: uniform].
    #[arg(long)]
    pub blend: Option<String>,
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Label mask output (SVOL).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the [ET, WT, TC] probabilities here.
    #[arg(long)]
    pub probs: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory holding `<case id>.svol` masks.
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_manifest: PathBuf,
    /// Hausdorff percentile; 100 is the classic distance.
    #[arg(long, default_value_t = 95.0)]
    pub hausdorff: f64,
    /// Where `eval.json` and `eval.csv` go [default: the prediction directory].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Also write the results as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use this shift for shifted windows in the attention oracle.
    #[arg(long, hide = true)]
    pub inject_shift: Option<usize>,
}

#[derive(Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// Input extents; one value for a cube or H,W,D [default: the model input size].
    #[arg(long, value_delimiter = ',')]
    pub input: Option<Vec<usize>>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<NumericalFailure>().is_some() || e.downcast_ref::<swinunetr::Error>().is_some_and(swinunetr::Error::is_numerical)
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let r = match cli.command {
        Command::Convert(a) => commands::convert(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Verify(a) => commands::verify(a),
        Command::Summarize(a) => commands::summarize(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
