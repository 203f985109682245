mod commands;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "susep",
    version,
    about = "Susceptibility source separation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a training set of normalized patches.
    Simulate(SimulateArgs),
    /// Train the separation network on a synthesized dataset.
    Train(TrainArgs),
    /// Predict χ+ and χ− for a whole acquisition by sliding-window inference.
    Infer(InferArgs),
    /// Separate an acquisition with the iterative least-squares solver.
    Baseline(BaselineArgs),
    /// Compare reconstructions against a reference, or run the contrastive ablation.
    Eval(EvalArgs),
    /// Write a numerical phantom and its synthesized acquisition.
    Phantom(PhantomArgs),
}

/// Accepts `n` or `nx,ny,nz`.
fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(format!("expected n or nx,ny,nz, got {s:?}")),
    }
}

/// Accepts `label=path`.
fn parse_labeled(s: &str) -> Result<(String, PathBuf), String> {
    let (label, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected label=path, got {s:?}"))?;
    if label.is_empty() || label.contains([',', '"', '\n']) {
        return Err(format!("invalid label {label:?}"));
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    phantoms: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_dims)]
    patch: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_dims)]
    stride: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_dims)]
    phantom_dims: Option<[usize; 3]>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Train without the contrastive term (ablation).
    #[arg(long)]
    no_contrast: bool,
    /// Restrict voxel-wise loss terms to the patch mask.
    #[arg(long)]
    masked_loss: bool,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with r2_prime.svol, local_field.svol, qsm.svol and optionally mask.svol.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Normalization statistics (norm.json or a dataset manifest); defaults to norm.json beside the checkpoint.
    #[arg(long)]
    norm: Option<PathBuf>,
    #[arg(long, value_parser = parse_dims)]
    window: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_dims)]
    stride: Option<[usize; 3]>,
    /// Clamp χ+ to ≥ 0 and χ− to ≤ 0.
    #[arg(long)]
    clamp: bool,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegressionKind {
    SingleVsMixed,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference directory with chi_pos.svol and chi_neg.svol.
    #[arg(long, required_unless_present = "ablation")]
    reference: Option<PathBuf>,
    /// Reconstruction to score, as label=directory; repeatable.
    #[arg(long = "recon", value_parser = parse_labeled)]
    recons: Vec<(String, PathBuf)>,
    /// Mask file; defaults to mask.svol in the reference directory.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Score whole volumes instead of masked voxels.
    #[arg(long)]
    no_mask: bool,
    /// ROI statistics for name=mask.svol; repeatable.
    #[arg(long = "roi", value_parser = parse_labeled)]
    rois: Vec<(String, PathBuf)>,
    /// Line profile "x0,y0,z0:x1,y1,z1:n" in voxel coordinates; repeatable.
    #[arg(long = "profile")]
    profiles: Vec<String>,
    #[arg(long, value_enum)]
    regression: Option<RegressionKind>,
    /// Compare two checkpoints trained with and without the contrastive term.
    #[arg(long, requires_all = ["data", "with", "without"])]
    ablation: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    with: Option<PathBuf>,
    #[arg(long)]
    without: Option<PathBuf>,
    /// Training history whose validation split selects the test patches.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhantomKind {
    Brain,
    Cylinder,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long, value_enum)]
    kind: PhantomKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid size of the brain phantom.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), CliError> = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Eval(a) => commands::eval(a),
        Command::Phantom(a) => commands::phantom(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
