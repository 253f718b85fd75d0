//! `gradcl`: synthetic data, source training, source-free adaptation,
//! evaluation, ablation and overlay export.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;
mod error;
mod manifest;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradcl::contrastive::SimilarityMetric;
use gradcl::data::{DatasetLayout, SplitKind};
use gradcl::nn::ArchitectureId;

#[derive(Parser, Debug)]
#[command(name = "gradcl", version, about = "Source-free optic cup/disc segmentation adaptation")]
pub struct Cli {
    /// Compute device. Only `cpu` is available.
    #[arg(long, env = "GRADCL_DEVICE", default_value = "cpu", global = true)]
    pub device: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset layout (refuge, drishti, rimone, synthetic_dir).
    #[arg(long)]
    pub layout: Option<DatasetLayout>,
    /// Square ROI side applied when loading images.
    #[arg(long)]
    pub roi_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic fundus domain in the synthetic_dir layout.
    SynthData(SynthArgs),
    /// Train a segmentation model on a labeled source domain.
    TrainSource(TrainArgs),
    /// Adapt a source checkpoint to unlabeled target images.
    Adapt(AdaptArgs),
    /// Score a checkpoint against labeled images.
    Evaluate(EvalArgs),
    /// Adapt once per similarity metric and compare on a labeled test split.
    Ablate(AblateArgs),
    /// Draw predicted contours and Grad-CAM heatmaps for images.
    Overlay(OverlayArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub split: Option<SplitKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub intensity_shift: Option<f32>,
    #[arg(long)]
    pub contrast_scale: Option<f32>,
    #[arg(long)]
    pub blur_sigma: Option<f32>,
    #[arg(long)]
    pub noise_sigma: Option<f32>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Labeled source dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub architecture: Option<ArchitectureId>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_augment: bool,
}

/// Adaptation overrides shared by `adapt` and `ablate`.
#[derive(Args, Debug, Clone, Default)]
pub struct AdaptOverrides {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub mc_passes: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Recompute pseudolabels from the current model every epoch.
    #[arg(long)]
    pub refresh_pseudolabels: bool,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    /// Source checkpoint.
    #[arg(long)]
    pub source: PathBuf,
    /// Target image directory. Masks there are never read.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub adapt: AdaptOverrides,
    #[arg(long)]
    pub metric: Option<SimilarityMetric>,
    /// JSON-lines file for per-batch refinement diagnostics.
    #[arg(long)]
    pub debug_dump: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: SplitKind,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub no_postprocess: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub source: PathBuf,
    /// Unlabeled target directory used for adaptation.
    #[arg(long)]
    pub target: PathBuf,
    /// Labeled directory used for scoring.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated metrics; all five when omitted.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<SimilarityMetric>,
    #[command(flatten)]
    pub adapt: AdaptOverrides,
}

#[derive(Args, Debug)]
pub struct OverlayArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gradcl: {e}");
            e.exit_code()
        }
    }
}
