//! `pdnet`: degradation, patch extraction, training, restoration, evaluation
//! and diagnostics for unrolled primal-dual restoration networks.

mod commands;
mod failure;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::{EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "pdnet",
    version,
    about = "Unrolled primal-dual networks for image restoration"
)]
struct Cli {
    /// Where to write the run manifest (default: next to the command's outputs).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic grayscale test scenes.
    SynthImages(SynthArgs),
    /// Blur and add Gaussian noise to every image in a directory.
    Degrade(DegradeArgs),
    /// Sample aligned clean/degraded patch pairs into a binary patch file.
    ExtractPatches(ExtractArgs),
    /// Train a network on a patch file.
    Train(TrainArgs),
    /// Restore one degraded image with a trained network.
    Restore(RestoreArgs),
    /// PSNR of degraded inputs and network restorations over a test set.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the reference Chambolle-Pock solver on one image.
    SolveCp(SolveCpArgs),
}

/// Images are read from a directory (`.pgm`/`.png`, sorted) or a list file.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ImageSource {
    /// Directory of grayscale images.
    #[arg(long)]
    in_dir: Option<PathBuf>,
    /// Text file with one image path per line, relative to the file.
    #[arg(long)]
    list: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Degradation {
    /// Side of the uniform blur kernel (1 = no blur).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..=31))]
    blur: u32,
    /// Noise standard deviation in 0-255 pixel units.
    #[arg(long, default_value_t = 25.0)]
    alpha: f64,
    /// Base seed; image `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    #[command(flatten)]
    source: ImageSource,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    degradation: Degradation,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PatchMode {
    /// Degrade the full image, then crop.
    Crop,
    /// Crop, then degrade each patch on its own periodic grid.
    PerPatch,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[command(flatten)]
    source: ImageSource,
    /// Output patch file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    degradation: Degradation,
    #[arg(long, default_value_t = 10)]
    patch_side: usize,
    /// Patches drawn from each image.
    #[arg(long, default_value_t = 200)]
    per_image: usize,
    #[arg(long, value_enum, default_value_t = PatchMode::Crop)]
    mode: PatchMode,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML training config. Optional when resuming.
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Patch file from `extract-patches`.
    #[arg(long)]
    patches: PathBuf,
    /// Checkpoint of the best network (lowest held-in evaluation loss).
    #[arg(long)]
    out: PathBuf,
    /// Training-state file for resuming (default: `<out>.state.json`).
    #[arg(long)]
    state: Option<PathBuf>,
    /// Continue from a training-state file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-step loss CSV (default: `loss.csv` next to the checkpoint).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Also draw the loss curve into this image.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Side of the uniform blur the patches were degraded with.
    #[arg(long, default_value_t = 3)]
    blur: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Independent,
    Averaged,
    Both,
}

#[derive(Debug, Args)]
struct RestoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Degraded image.
    #[arg(long)]
    input: PathBuf,
    /// Restored image (`.png` or `.pgm`).
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Averaged)]
    mode: ModeArg,
    /// Window stride in averaged mode.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Clean reference; when given, PSNR is reported.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Trained checkpoint; give one per scenario, or one for all of them.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    source: ImageSource,
    /// Scenario `BLUR:ALPHA`, e.g. `3:50`. Repeatable.
    #[arg(long = "scenario", default_value = "3:50")]
    scenarios: Vec<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Base degradation seed; image `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-image CSV (`image,scenario,method,psnr_db`).
    #[arg(long)]
    out: PathBuf,
    /// Mean-PSNR table, methods by scenario (default: `table.csv` next to `--out`).
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Network depths, cycled over trials.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Sampled in-support entries of `L` per layer.
    #[arg(long, default_value_t = 16)]
    l_samples: usize,
    /// Feature design of the random cases (default: a small three-block design).
    #[arg(long)]
    design: Option<String>,
    #[arg(long, default_value_t = 10)]
    patch_side: usize,
    #[arg(long, default_value_t = 3)]
    blur: usize,
    /// JSON report with every checked entry.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for the manifest when `--report` is not given.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Scale one group's analytic derivatives (`GROUP:FACTOR`); test hook.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Prior {
    /// Anisotropic total variation (forward differences).
    Tv,
    /// `L = 0`: least-squares deblurring.
    Zero,
    /// Random operator on a feature design; needs a square patch-sized image.
    Design,
}

#[derive(Debug, Args)]
struct SolveCpArgs {
    /// Clean image; the observation is simulated from it.
    #[arg(long)]
    image: PathBuf,
    /// Use this observed image instead of simulating one.
    #[arg(long)]
    observed: Option<PathBuf>,
    /// Restrict to a window `ROW,COL,HEIGHT,WIDTH`.
    #[arg(long, value_delimiter = ',')]
    crop: Option<Vec<usize>>,
    #[command(flatten)]
    degradation: Degradation,
    #[arg(long, value_enum, default_value_t = Prior::Tv)]
    prior: Prior,
    /// Weight multiplying `L`.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value = "f5s2n30+f7s3n30+f10s10n30")]
    design: String,
    #[arg(long, default_value_t = 0)]
    l_seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    l_std: f64,
    /// Primal step (default `0.99 / |L|`).
    #[arg(long)]
    tau: Option<f64>,
    /// Dual step (default `0.99 / |L|`).
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Restored image.
    #[arg(long)]
    out: PathBuf,
    /// Objective trace CSV (default: `trace.csv` next to `--out`).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            let code = if err.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    let code = commands::run(cli);
    ExitCode::from(code as u8)
}
