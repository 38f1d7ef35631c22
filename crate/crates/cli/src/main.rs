mod commands;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Complete-the-look dataset generation, training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "ctl", version, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat key=value config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. `--set epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub overrides: Vec<(String, String)>,
    /// Log filter for standard error (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", value_name = "LEVEL")]
    pub log_level: String,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

/// Feature source for commands that read a cropped manifest.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Complete-the-look manifest (config key `ctl_manifest`).
    #[arg(long, value_name = "FILE")]
    pub ctl: Option<PathBuf>,
    /// Scene split file (config key `split_file`).
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    /// Precomputed feature cache; selects the precomputed backbone.
    #[arg(long, value_name = "FILE")]
    pub features: Option<PathBuf>,
}

/// Training hyperparameters exposed as flags.
#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Triplets per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Hinge margin.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Embedding dimension.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Distance variant: G, L, G+L0 or G+L.
    #[arg(long)]
    pub variant: Option<String>,
    /// Seed for initialization, triplet sampling and dropout.
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Scene view used for training: cropped or full.
    #[arg(long)]
    pub view: Option<String>,
}

/// Where scores come from for evaluation commands.
#[derive(Debug, Clone, Args)]
pub struct ScorerArgs {
    /// Trained checkpoint to evaluate.
    #[arg(long, value_name = "FILE", conflicts_with = "scorer")]
    pub checkpoint: Option<PathBuf>,
    /// Baseline scorer instead of a model: popularity, rawfeature, linear-metric or random.
    #[arg(long)]
    pub scorer: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop shop-the-look pairs into a complete-the-look manifest.
    Generate {
        /// Input shop-the-look manifest.
        #[arg(long, value_name = "FILE")]
        stl: Option<PathBuf>,
        /// Output complete-the-look manifest.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Crop mode: fashion (above/below) or home (all four sides).
        #[arg(long)]
        mode: Option<String>,
        /// Fractional box expansion per side.
        #[arg(long)]
        expand: Option<f64>,
        /// Minimum kept crop area as a fraction of the scene.
        #[arg(long)]
        min_area: Option<f64>,
        /// Comma-separated categories to discard.
        #[arg(long, value_name = "LIST")]
        exclude: Option<String>,
        /// Fail if a referenced image file is missing.
        #[arg(long)]
        verify_images: bool,
    },
    /// Assign scenes to train/validation/test splits.
    Split {
        /// Complete-the-look manifest.
        #[arg(long, value_name = "FILE")]
        ctl: Option<PathBuf>,
        /// Output split file.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Split seed (config key `data_seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Train,val,test fractions, e.g. 0.8,0.1,0.1.
        #[arg(long, value_name = "A,B,C")]
        ratios: Option<String>,
    },
    /// Write a synthetic planted-rule dataset.
    Synth {
        /// Output directory for images and `stl.jsonl`.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        scenes: Option<usize>,
        /// Products per category.
        #[arg(long)]
        products: Option<usize>,
        /// Number of categories.
        #[arg(long)]
        categories: Option<usize>,
        /// Paste each positive product into its scene.
        #[arg(long)]
        paste: bool,
        /// Generator seed (config key `data_seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract backbone features for every image of a manifest.
    Features {
        /// Complete-the-look manifest.
        #[arg(long, value_name = "FILE")]
        ctl: Option<PathBuf>,
        /// Output feature cache.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Seed of the toy backbone projection.
        #[arg(long)]
        backbone_seed: Option<u64>,
    },
    /// Train the compatibility model.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Directory for `best.ckpt`, `last.ckpt` and `history.json`.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are complete; `--resume` continues later.
        #[arg(long, value_name = "EPOCHS")]
        stop_after: Option<usize>,
    },
    /// Train and test every distance variant.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Output JSON table.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Binary accuracy of a trained model on the test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Trained checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Output JSON report.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Top-K accuracy curve on the test split.
    Topk {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        /// Comma-separated cutoffs; default is every K up to the largest pool.
        #[arg(long, value_name = "LIST")]
        k: Option<String>,
        /// Output CSV.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Attention-hit rates of a trained model.
    Attention {
        #[command(flatten)]
        data: DataArgs,
        /// Trained checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Output JSON summary.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write one PGM attention map per test pair here.
        #[arg(long, value_name = "DIR")]
        maps: Option<PathBuf>,
    },
    /// Evaluate a baseline scorer.
    Baseline {
        #[command(flatten)]
        data: DataArgs,
        /// popularity, rawfeature, linear-metric or random.
        #[arg(long)]
        scorer: String,
        /// Output JSON report.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(&cli.global.log_level);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(usage) = err.downcast_ref::<commands::UsageError>() {
                eprintln!("error: {usage}\n\nFor more information, try '--help'.");
                return ExitCode::from(2);
            }
            match err.chain().find_map(|e| e.downcast_ref::<ctl::Error>()) {
                Some(module) => eprintln!("error: {}: {err:#}", module.name()),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::from(1)
        }
    }
}
