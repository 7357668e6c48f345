mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcp_core::toybench::Architecture;

use crate::config::CliConfig;
use crate::error::{CliError, CliResult};

/// Progressive channel pruning for small convolutional networks.
#[derive(Debug, Parser)]
#[command(name = "pcp", version)]
pub struct Cli {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print one machine-readable JSON object instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic source and target datasets.
    Generate(GenerateArgs),
    /// Train a reference network from scratch.
    Train(TrainArgs),
    /// Prune a model progressively until it reaches a compression ratio.
    Prune(PruneArgs),
    /// Report top-1 accuracy and FLOPs of a model on a labelled dataset.
    Eval(EvalArgs),
    /// Label confident samples of a dataset with a model's predictions.
    PseudoLabel(PseudoLabelArgs),
    /// Fine-tune a (pruned) model with SGD.
    Finetune(FinetuneArgs),
    /// Print a model's layers, kept channels and FLOPs.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise: Option<f32>,
    #[arg(long, value_name = "N")]
    pub train: Option<usize>,
    #[arg(long, value_name = "N")]
    pub val: Option<usize>,
    #[arg(long, value_name = "N")]
    pub test: Option<usize>,
}

/// Options shared by `train` and `finetune`.
#[derive(Debug, Args)]
pub struct TrainingArgs {
    /// Labelled training dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Labelled dataset evaluated after every epoch.
    #[arg(long, value_name = "DIR")]
    pub val: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// tinyvgg or tinyres.
    #[arg(long, default_value = "tinyvgg", value_parser = parse_arch)]
    pub arch: Architecture,
    /// Append photometrically augmented copies of the training set.
    #[arg(long)]
    pub augment: bool,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    /// Output of `generate`; supplies source_train, source_val and
    /// target_train unless overridden.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Calibration dataset (default: <data>/source_train).
    #[arg(long, value_name = "DIR")]
    pub calib: Option<PathBuf>,
    /// Validation dataset (default: <data>/source_val).
    #[arg(long, value_name = "DIR", conflicts_with = "pseudo")]
    pub val: Option<PathBuf>,
    /// Pseudo-label file; calibration and validation then mix source and
    /// pseudo-labelled target samples.
    #[arg(long, value_name = "FILE")]
    pub pseudo: Option<PathBuf>,
    /// Target dataset the pseudo labels index (default: <data>/target_train).
    #[arg(long, value_name = "DIR", requires = "pseudo")]
    pub target: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub target_ratio: Option<f64>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Worker threads for the attempting step; 0 picks automatically.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Seed of position sampling and of the source/target mix.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub calib_images: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Where to write the pseudo-label JSON file.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    match s {
        "tinyvgg" | "tiny-vgg" => Ok(Architecture::TinyVgg),
        "tinyres" | "tiny-res" => Ok(Architecture::TinyRes),
        _ => Err(format!("unknown architecture {s:?}, expected tinyvgg or tinyres")),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(error::config_error(format!("config file not found: {}", path.display())));
            }
            CliConfig::load(path).map_err(CliError::Config)?
        }
        None => CliConfig::default(),
    };
    let ctx = commands::Context {
        config_path: cli.config.clone(),
        json: cli.json,
    };
    match cli.command {
        Command::Generate(a) => commands::generate(&ctx, cfg, a),
        Command::Train(a) => commands::train(&ctx, cfg, a),
        Command::Prune(a) => commands::prune(&ctx, cfg, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::PseudoLabel(a) => commands::pseudo_label(&ctx, cfg, a),
        Command::Finetune(a) => commands::finetune(&ctx, cfg, a),
        Command::Inspect(a) => commands::inspect(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PCP_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pcp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
