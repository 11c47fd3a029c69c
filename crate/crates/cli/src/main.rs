//! `a3r`: encode RGBD observations, train the toy heads, run the ablation
//! matrix and benchmark the encoder pipeline.
//!
//! Exit codes: 0 success, 1 parse or usage error, 2 dimension mismatch,
//! 3 I/O error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use a3r_core::config::Variant;
use a3r_core::decoders::HeadKind;
use a3r_core::pipeline::Precision;
use a3r_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "a3r", version, about = "End-effector-centric RGBD scene encoder")]
struct Cli {
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true, env = "A3R_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode one multi-camera observation into z and attention weights.
    Encode(EncodeArgs),
    /// Time the encoder pipeline on synthetic inputs (backbone excluded).
    Bench(BenchArgs),
    /// Train every requested variant and report final losses and camera-sweep drift.
    Ablate(AblateArgs),
    /// Train a policy with one of the toy decoder heads.
    Train(TrainArgs),
    /// Write a synthetic reach dataset.
    GenDataset(GenDatasetArgs),
    /// Render one synthetic scene into an encode-ready frames directory.
    Render(RenderArgs),
}

/// Encoder configuration: a JSON file (missing fields take defaults) plus
/// flag overrides applied on top.
#[derive(Debug, Clone, Args)]
pub struct EncoderArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Apply one ablation variant on top of the config.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Max pooling instead of attention pooling.
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub num_points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Patch stride of the built-in test backbone.
    #[arg(long, default_value_t = 4)]
    pub backbone_stride: usize,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Calibration JSON: array of per-camera intrinsics and camera-to-base extrinsics.
    #[arg(long)]
    pub calib: PathBuf,
    /// Directory with cam{i}_rgb.a3rt, cam{i}_depth.a3rt and proprio.json.
    #[arg(long)]
    pub frames_dir: PathBuf,
    /// Directory with precomputed cam{i}_features.a3rt volumes.
    #[arg(long, conflicts_with = "test_backbone", required_unless_present = "test_backbone")]
    pub features_dir: Option<PathBuf>,
    /// Compute features with the built-in deterministic backbone.
    #[arg(long)]
    pub test_backbone: bool,
    /// Instruction text, embedded with the built-in hash embedder.
    #[arg(long, conflicts_with = "lang_embedding")]
    pub lang: Option<String>,
    /// Precomputed language embedding tensor.
    #[arg(long)]
    pub lang_embedding: Option<PathBuf>,
    /// Trained checkpoint directory; its encoder config replaces --config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// Also write the sampled cloud as PLY.
    #[arg(long)]
    pub ply: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Encoder config JSON; defaults to the full-size encoder with d = 64.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub n_iters: usize,
    #[arg(long, default_value_t = 128)]
    pub image_size: usize,
    #[arg(long, default_value_t = 2)]
    pub cameras: usize,
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    #[arg(long, default_value = "f32", value_parser = parse_precision)]
    pub precision: Precision,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated variant names, or "all".
    #[arg(long, default_value = "all")]
    pub variants: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    /// Held-out episodes (taken from the end of the dataset) for the camera sweep.
    #[arg(long, default_value_t = 20)]
    pub eval_scenes: usize,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub head_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub head: HeadKind,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Head sizes; `kind` is taken from --head.
    #[arg(long)]
    pub head_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory for checkpoint, loss CSV and run manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long, default_value_t = 64)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reach task config JSON; missing fields take defaults.
    #[arg(long)]
    pub reach_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Scene JSON; without it a reach-task scene is drawn from --seed.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::DimensionMismatch { .. } | Error::Shape(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Encode(a) => commands::encode(a),
        Command::Bench(a) => commands::bench(a, cli.threads.unwrap_or(1)),
        Command::Ablate(a) => commands::ablate(a),
        Command::Train(a) => commands::train(a),
        Command::GenDataset(a) => commands::gen_dataset(a),
        Command::Render(a) => commands::render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
