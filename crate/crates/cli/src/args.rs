use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use t4t_core::model::{ModelConfig, Variant};

#[derive(Debug, Parser)]
#[command(name = "t4t", version, about = "Dual-head transformer segmentation and navigation feedback toolkit")]
pub struct Cli {
    /// Seed for weights, data and shuffling.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Single-threaded kernels; outputs are bitwise reproducible either way,
    /// this also pins the execution order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the encoder pyramid and head output shapes at several sizes.
    Shapes(ShapesArgs),
    /// Parameter count report.
    Params(ComplexityArgs),
    /// FLOP report (MAC=2, with the MAC=1 figure alongside).
    Flops(ComplexityArgs),
    /// End-to-end finite-difference gradient check of the Nano model.
    Gradcheck(GradcheckArgs),
    /// Write synthetic scenes or the walkway replay fixture.
    Synth(SynthArgs),
    /// Train the Nano model on synthetic scenes.
    TrainToy(TrainArgs),
    /// Evaluate a checkpoint on a directory of labelled scenes.
    Eval(EvalArgs),
    /// Segment an image and write masks and overlays.
    Infer(InferArgs),
    /// Time inference passes.
    Latency(LatencyArgs),
    /// Replay RGB-D frames through the navigation decision loop.
    Navsim(NavsimArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Tiny,
    Small,
    Medium,
    Nano,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Tiny => Variant::Tiny,
            VariantArg::Small => Variant::Small,
            VariantArg::Medium => Variant::Medium,
            VariantArg::Nano => Variant::Nano,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    pub variant: VariantArg,
    /// Decoder embedding width.
    #[arg(long)]
    pub tpm_channels: Option<usize>,
    /// Build both the general and the transparency head.
    #[arg(long)]
    pub dual_head: bool,
}

impl ModelArgs {
    pub fn config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::for_variant(self.variant.into());
        cfg = if self.dual_head { cfg.dual_head() } else { cfg.single_head() };
        match self.tpm_channels {
            Some(c) => cfg.with_tpm_channels(c),
            None => cfg,
        }
    }
}

/// `512` or `512x384` (height by width).
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|v| (v, v)),
    }
}

#[derive(Debug, Args)]
pub struct ShapesArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Square input sizes to run.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 224, 512])]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input size for FLOPs.
    #[arg(long, value_parser = parse_size, default_value = "512")]
    pub size: (usize, usize),
    /// Name components to group rows by; 0 prints every layer.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// JSON lines instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Coordinates sampled per array; 0 checks every coordinate.
    #[arg(long, default_value_t = 4)]
    pub per_tensor: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKind {
    /// Labelled scenes for training and evaluation.
    Scenes,
    /// RGB-D walkway frames with precomputed masks for `navsim`.
    Walkway,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "scenes")]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, value_parser = parse_size, default_value = "64")]
    pub size: (usize, usize),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `synth`; scenes are generated from the seed when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch losses as CSV.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// PPM image.
    #[arg(long)]
    pub image: PathBuf,
    /// Directory for `<stem>.<head>.pgm` masks and `<stem>.<head>.overlay.ppm`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Trained weights; randomly initialised weights from the seed otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f32,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 300)]
    pub runs: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, value_parser = parse_size, default_value = "512")]
    pub size: (usize, usize),
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct NavsimArgs {
    /// Replay directory of `NNNN.ppm` + `NNNN.pgm` frames.
    #[arg(long)]
    pub frames: PathBuf,
    /// Seconds between decisions; overrides the config file.
    #[arg(long)]
    pub interval: Option<f64>,
    /// Frame rate of the replay; frame `NNNN` arrives at `NNNN / fps` seconds.
    #[arg(long, default_value_t = 1.0)]
    pub fps: f64,
    /// JSON file with any navigation settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dual-head weights for frames without precomputed masks.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Event log; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
