mod commands;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::data::UsageError;

#[derive(Debug, Parser)]
#[command(name = "clickseg", version, about = "Interactive multi-object point cloud segmentation")]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Zero wall-clock timings in outputs and use sequential session ids, so
    /// repeated runs produce identical files.
    #[arg(long, global = true, env = "CLICKSEG_DETERMINISTIC")]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a benchmark manifest.
    Eval(EvalArgs),
    /// Run the simulated user on one scene.
    Simulate(SimulateArgs),
    /// Start the HTTP annotation service.
    Serve(ServeArgs),
    /// Write synthetic scenes to a directory.
    Generate(GenerateArgs),
    /// Pick benchmark target objects for a directory of scenes.
    BenchManifest(BenchArgs),
    /// Color a scene by the principal components of its backbone features.
    FeaturesPca(PcaArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Architecture or schedule ablation, repeatable: no-c2s, no-c2c,
    /// no-s2c, no-attention-mask, no-iterative, early-fusion, mean-fusion.
    #[arg(long = "ablation")]
    pub ablations: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Click sampler: iterative or random.
    #[arg(long)]
    pub sampler: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Required unless the oracle predictor is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Benchmark manifest written by `bench-manifest`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding the manifest's scenes.
    #[arg(long)]
    pub scene_dir: PathBuf,
    /// multi (all targets per scene at once) or single (one target at a time).
    #[arg(long, default_value = "multi")]
    pub protocol: String,
    /// model or oracle.
    #[arg(long, default_value = "model")]
    pub predictor: String,
    /// Click budget per object.
    #[arg(long, default_value_t = 20)]
    pub clicks_per_object: usize,
    /// Stop a scene once every object reaches this IoU.
    #[arg(long, default_value_t = 1.0)]
    pub stop_iou: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene file (.ply or .json) with labels.
    #[arg(long)]
    pub scene: PathBuf,
    /// Comma-separated target object ids; all labeled objects by default.
    #[arg(long)]
    pub targets: Option<String>,
    /// Total click budget; 20 per object by default.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub stop_iou: f64,
    /// Also write the final labels as a PLY.
    #[arg(long)]
    pub mask_ply: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "CLICKSEG_MODEL")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "CLICKSEG_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "CLICKSEG_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "CLICKSEG_MAX_POINTS", default_value_t = 2_000_000)]
    pub max_points: usize,
    /// Directory of scenes addressable by id.
    #[arg(long, env = "CLICKSEG_SCENE_DIR")]
    pub scene_dir: Option<PathBuf>,
    /// Browser origin allowed by CORS; any origin when unset.
    #[arg(long, env = "CLICKSEG_CORS_ORIGIN")]
    pub cors_origin: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 2)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 5)]
    pub max_objects: usize,
    /// Floor size in meters, `X,Y`.
    #[arg(long, default_value = "2.5,2.5")]
    pub room_size: String,
    /// ply, ply-binary or json.
    #[arg(long, default_value = "ply")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub scene_dir: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 10)]
    pub max_objects: usize,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Colored PLY to write.
    #[arg(long)]
    pub out: PathBuf,
}

/// 2 for usage errors, 3 for bad or missing data, 4 for numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<clickseg::Error>() {
            return match e {
                clickseg::Error::Divergence(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let ctx = commands::Context {
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Serve(a) => commands::serve(&ctx, a),
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::BenchManifest(a) => commands::bench_manifest(&ctx, a),
        Command::FeaturesPca(a) => commands::features_pca(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
