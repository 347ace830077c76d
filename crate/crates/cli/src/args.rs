use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "gem", version, about = "Gaussian eigenmodels: distill, refine, fit, render and serve")]
pub struct Cli {
    /// JSON configuration; flags take precedence over its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic animated face dataset.
    Synth(SynthArgs),
    /// Distill a sequence of Gaussian clouds into an eigenmodel.
    Distill(DistillArgs),
    /// Photometrically refine a model's bases against dataset views.
    Refine(RefineArgs),
    /// Fit coefficients of a frozen model to target views.
    Fit(FitArgs),
    /// Render a model at given coefficients.
    Render(RenderArgs),
    /// Render a strip sweeping one component over +-3 sigma.
    Traverse(TraverseArgs),
    /// Train the feature-to-coefficient regressor.
    RegressTrain(RegressTrainArgs),
    /// Predict coefficients from features with a trained regressor.
    RegressApply(RegressApplyArgs),
    /// Compare two images (PSNR, SSIM, L1).
    Metrics(MetricsArgs),
    /// Describe a model file.
    Info(InfoArgs),
    /// Serve a model over HTTP for the viewer.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub cameras: Option<usize>,
    /// Side of the square Gaussian map.
    #[arg(long)]
    pub tex_resolution: Option<usize>,
    /// Side of the square renders.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub feature_noise: Option<f64>,
    #[arg(long)]
    pub position_noise: Option<f64>,
    /// Components per modality: one count or four comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub components: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Directory of PLY frames, or a dataset root with a `clouds/` folder.
    pub input: PathBuf,
    /// Output model file.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Components per modality: one count or four comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub components: Option<Vec<usize>>,
    /// Texel layout JSON; defaults to `layout.json` next to the frames.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Take texel colors from this frame instead of the average.
    #[arg(long)]
    pub color_frame: Option<usize>,
    /// Also report reconstruction PSNR for these component counts (needs
    /// cameras in `cams/`).
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    pub model: PathBuf,
    /// Dataset directory (as written by `gem synth`).
    pub dataset: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub orthogonalize_every: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training frames (default: all).
    #[arg(long, value_delimiter = ',')]
    pub frames: Option<Vec<usize>>,
    /// Coefficient table for the training frames, in the model's basis
    /// (default: project the dataset clouds).
    #[arg(long)]
    pub coeffs: Option<PathBuf>,
    /// Per-step loss history as CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Training coefficients in the refined basis.
    #[arg(long)]
    pub coeffs_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub model: PathBuf,
    /// Take cameras and target images of `--frame` from this dataset.
    #[arg(long, conflicts_with_all = ["cams", "images"])]
    pub dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    pub frame: Option<usize>,
    /// Camera JSON files, paired with `--images`.
    #[arg(long, value_delimiter = ',', requires = "images")]
    pub cams: Option<Vec<PathBuf>>,
    #[arg(long, value_delimiter = ',', requires = "cams")]
    pub images: Option<Vec<PathBuf>>,
    /// Starting coefficients (JSON); default zero.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Fitted coefficients (JSON).
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub background: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub model: PathBuf,
    /// Output image; `.png`, `.ppm` or `.pfm`.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Camera JSON; default frames the mean cloud from the front.
    #[arg(long)]
    pub cam: Option<PathBuf>,
    /// Coefficients (JSON); default zero, the mean.
    #[arg(long, conflicts_with = "coeffs")]
    pub k: Option<PathBuf>,
    /// Coefficient table; use with `--frame`.
    #[arg(long, requires = "frame")]
    pub coeffs: Option<PathBuf>,
    #[arg(long)]
    pub frame: Option<usize>,
    /// Side of the default camera's image.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub background: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct TraverseArgs {
    pub model: PathBuf,
    #[arg(long, default_value = "position")]
    pub modality: String,
    #[arg(long, default_value_t = 0)]
    pub component: usize,
    /// Images in the strip.
    #[arg(long, default_value_t = 7)]
    pub steps: usize,
    /// Output strip; `.ppm`, `.png` or `.pfm`.
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub cam: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub background: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct RegressTrainArgs {
    /// Pair manifest JSON; its paths are relative to its directory.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Model whose standard deviations bound the output.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RegressApplyArgs {
    #[arg(long)]
    pub regressor: PathBuf,
    /// Feature table (`features.bin`).
    #[arg(long)]
    pub features: PathBuf,
    /// Rows to regress (default: all).
    #[arg(long, value_delimiter = ',')]
    pub rows: Option<Vec<usize>>,
    /// Coefficient table output.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also print the coefficients as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub json: bool,
    /// Include the mean vectors (JSON only).
    #[arg(long, requires = "json")]
    pub means: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    pub model: PathBuf,
    /// Dataset whose cameras `/render` may select with `cam=`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Port; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// Directory served for every other path (the viewer bundle).
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Side of the default camera's image.
    #[arg(long)]
    pub size: Option<usize>,
}
