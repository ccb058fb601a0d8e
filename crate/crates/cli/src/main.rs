//! Command-line front end: phantom generation, registration, error
//! perception, style transfer, segmenter training and the full pipeline.

mod commands;
mod settings;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use mirrorseg::pipeline::StyleMode;

#[derive(Parser, Debug)]
#[command(name = "mirrorseg", version, about = "One-shot atlas registration and segmentation on 3D volumes")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Master seed; stage seeds are derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// `key = value` config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic atlas/subject pair or a whole family.
    Phantom(PhantomArgs),
    /// Register a moving image to a fixed image.
    Register(RegisterArgs),
    /// Estimate the registration error and confidence maps of a pair.
    Perceive(PerceiveArgs),
    /// Confidence-weighted Fourier style transfer (IST with `--beta`).
    Wist(WistArgs),
    /// Train the voxel segmenter.
    TrainSeg(TrainSegArgs),
    /// Segment an image with a trained network.
    Segment(SegmentArgs),
    /// Dice and Hausdorff metrics of predicted against reference labels.
    Metrics(MetricsArgs),
    /// Run the iterative registration/segmentation loop.
    Pipeline(PipelineArgs),
    /// Convert NIfTI-1 or V3D volumes to V3D.
    Convert(ConvertArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Cube edge length in voxels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of foreground structures.
    #[arg(long)]
    pub structures: Option<usize>,
    /// Max magnitude of the smooth random deformation, in voxels.
    #[arg(long)]
    pub deformation: Option<f64>,
    /// Peak displacement of an asymmetric bump, in voxels.
    #[arg(long)]
    pub bump: Option<f64>,
    /// Additive noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Draw a random intensity style for the subject.
    #[arg(long)]
    pub random_style: bool,
    /// Write an atlas with unlabeled and test subjects instead of a pair.
    #[arg(long)]
    pub family: bool,
    #[arg(long)]
    pub unlabeled: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct RegArgs {
    /// Optimizer steps per pyramid level.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub lambda_smo: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    /// Labels of the moving image, warped along and used for weak supervision.
    #[arg(long)]
    pub moving_labels: Option<PathBuf>,
    /// Predicted labels of the fixed image for weak supervision.
    #[arg(long, requires = "moving_labels")]
    pub fixed_pred: Option<PathBuf>,
    #[command(flatten)]
    pub reg: RegArgs,
}

#[derive(Args, Debug)]
pub struct PerceiveArgs {
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long)]
    pub unlabeled: PathBuf,
    #[command(flatten)]
    pub reg: RegArgs,
}

#[derive(Args, Debug)]
pub struct WistArgs {
    /// Warped atlas image whose phase is kept.
    #[arg(long)]
    pub warped_atlas: PathBuf,
    /// Image whose amplitude spectrum supplies the style.
    #[arg(long)]
    pub unlabeled: PathBuf,
    /// Confidence map; required unless `--beta` is given.
    #[arg(long, required_unless_present = "beta")]
    pub confidence: Option<PathBuf>,
    /// Number of confidence bins.
    #[arg(long)]
    pub n: Option<usize>,
    /// Fixed style strength for a single global mix (IST).
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainSegArgs {
    /// Supervised images; pair each with a `--labels`.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub labels: Vec<PathBuf>,
    /// Images for the confidence-guided term; pair each with `--pseudo` and `--confidence`.
    #[arg(long)]
    pub weighted_image: Vec<PathBuf>,
    #[arg(long)]
    pub pseudo: Vec<PathBuf>,
    #[arg(long)]
    pub confidence: Vec<PathBuf>,
    /// Class count; defaults to one more than the largest label.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Predicted label volumes; pair each with a `--truth`.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub truth: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long)]
    pub style: Option<StyleMode>,
    /// Disable the confidence-guided Dice term.
    #[arg(long)]
    pub no_cgd: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Atlas image; without one a phantom family is generated.
    #[arg(long, requires = "atlas_labels")]
    pub atlas: Option<PathBuf>,
    #[arg(long, requires = "atlas")]
    pub atlas_labels: Option<PathBuf>,
    #[arg(long, requires = "atlas")]
    pub unlabeled: Vec<PathBuf>,
    #[arg(long, requires = "atlas")]
    pub test: Vec<PathBuf>,
    #[arg(long, requires = "atlas")]
    pub test_labels: Vec<PathBuf>,
    /// Cube edge of the generated family.
    #[arg(long, conflicts_with = "atlas")]
    pub size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub reg: RegArgs,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Store as integer labels.
    #[arg(long)]
    pub labels: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    commands::run(cli)
}
