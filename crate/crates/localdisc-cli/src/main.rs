//! `localdisc`: unsupervised local-discriminative representation learning
//! on medical-style images, from synthetic data generation through staged
//! training to evaluation.
//!
//! Exit codes: 0 success, 1 user error (arguments, configs, datasets,
//! checkpoints), 2 runtime failure (divergence, I/O mid-run).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "localdisc",
    version,
    about = "Pixel-wise representation learning without labels: patch-discrimination \
             pretraining, local-discrimination clustering, prior-guided refinement, \
             and downstream fine-tuning",
    after_help = "Set LOCALDISC_NUM_WORKERS to control the compute thread count \
                  (default: all cores)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of procedurally drawn anatomical scenes
    SynthData(SynthDataArgs),
    /// Stage 1: patch-discrimination pretraining on unlabeled images
    Pretrain(PretrainArgs),
    /// Stage 2: joint local-discrimination training, from a pretrain checkpoint
    TrainLd(LdArgs),
    /// Stage 3: adversarial prior-guided clustering, from an ld checkpoint
    TrainPrior(PriorArgs),
    /// Fine-tune a segmentation decoder on labeled images
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a labeled dataset; writes a report and overlays
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct SynthDataArgs {
    /// Scene spec TOML; built-in defaults apply when omitted
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of images to generate
    #[arg(long)]
    pub count: usize,
    /// Overrides the spec's rng_seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (images/, masks/, layouts.json)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write this many simulated reference masks per structure under refs/
    #[arg(long, default_value_t = 0)]
    pub refs: usize,
    /// Structures receiving simulated references
    #[arg(long, value_delimiter = ',', default_value = "disk")]
    pub refs_structures: Vec<String>,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct CommonTrainArgs {
    /// Stage config TOML; omitted keys take the stage defaults
    #[arg(long)]
    pub config: PathBuf,
    /// Training images: a dataset directory or a flat directory of PNGs
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (checkpoint.ckpt, metrics.jsonl, manifest.json)
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
}

#[derive(Args)]
pub struct LdArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    /// Pretraining checkpoint to start from (run `localdisc pretrain` first)
    #[arg(long)]
    pub init: PathBuf,
}

#[derive(Args)]
pub struct PriorArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    /// Local-discrimination checkpoint to start from (run `localdisc train-ld` first)
    #[arg(long)]
    pub init: PathBuf,
    /// Reference masks: <refs>/<structure>/*.png, unpaired with the images
    #[arg(long)]
    pub refs: PathBuf,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonTrainArgs,
    /// Encoder checkpoint from train-ld or train-prior
    #[arg(long, conflicts_with = "random_init")]
    pub init: Option<PathBuf>,
    /// Train from random initialization (from-scratch baseline)
    #[arg(long)]
    pub random_init: bool,
    /// Held-out labeled dataset scored after each epoch
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to score (from train-ld, train-prior, or finetune)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// The training config the checkpoint was produced with (network shapes)
    #[arg(long)]
    pub config: PathBuf,
    /// Labeled dataset directory (images/ and masks/<structure>/)
    #[arg(long)]
    pub data: PathBuf,
    /// Structures to score; default: every non-background structure
    #[arg(long, value_delimiter = ',')]
    pub structures: Option<Vec<String>>,
    /// Output directory (report.json, report.txt, overlays/)
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_workers();
    let result = match &cli.command {
        Command::SynthData(args) => commands::synth_data(args),
        Command::Pretrain(args) => commands::pretrain(args),
        Command::TrainLd(args) => commands::train_ld(args),
        Command::TrainPrior(args) => commands::train_prior(args),
        Command::Finetune(args) => commands::finetune(args),
        Command::Eval(args) => commands::eval(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            exit_code(&e)
        }
    }
}

/// User mistakes exit 1; failures of a validly configured run exit 2.
fn exit_code(e: &localdisc::Error) -> i32 {
    use localdisc::Error;
    match e {
        Error::Config(_)
        | Error::InvalidInput { .. }
        | Error::Dataset { .. }
        | Error::Checkpoint { .. }
        | Error::Image { .. } => 1,
        Error::Diverged { .. } | Error::Io { .. } | Error::Serde(_) => 2,
    }
}

fn report(e: &localdisc::Error) {
    eprintln!("error: {e}");
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}

/// LOCALDISC_NUM_WORKERS caps the compute thread pool; unset uses all cores.
fn init_workers() {
    if let Ok(v) = std::env::var("LOCALDISC_NUM_WORKERS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring LOCALDISC_NUM_WORKERS={v:?}; need a positive integer"),
        }
    }
}
