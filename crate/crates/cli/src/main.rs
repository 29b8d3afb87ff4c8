//! `hsvseg` command-line driver.
//!
//! Every subcommand writes under one `--out` tree (`manifests/`,
//! `checkpoints/`, `eval/`, `reports/`). Options may also come from a flat
//! `key = value` file given with `--config`; flags win over the file, the file
//! over built-in defaults. Exit status is 0 on success, 1 for invalid input or
//! configuration and 2 for runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsvseg::datamodel::{ModalityName, Split};
use hsvseg::experiments::ExperimentKind;
use hsvseg::Backend;

use crate::config::{ConfigFile, Invalid};

#[derive(Parser, Debug)]
#[command(
    name = "hsvseg",
    version,
    about = "Bubble segmentation for high-speed boiling video"
)]
struct Cli {
    /// Flat `key = value` file supplying values for long options
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Validate inputs and print what would be done, without writing anything
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Preprocess raw recordings into frames, masks and a split manifest
    Prepare(PrepareArgs),
    /// Generate a synthetic bubble dataset with exact masks
    Synth(SynthArgs),
    /// Fine-tune a promptable checkpoint or train a U-Net
    Train(TrainCmdArgs),
    /// Segment frames and write masks
    Infer(InferArgs),
    /// Score a model on a manifest split
    Eval(EvalArgs),
    /// Run one of the comparison experiments end to end
    Experiment(ExperimentArgs),
    /// Render the results table and box plots from stored CSVs
    Report(ReportArgs),
    /// Write a randomly initialised promptable checkpoint
    InitFoundation(InitFoundationArgs),
}

#[derive(Args, Debug, Default)]
struct OutArg {
    /// Output directory tree [default: out]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct PrepareArgs {
    /// Directory with one `<fluid>/frames`, `<fluid>/masks` pair per fluid
    #[arg(long, value_name = "DIR")]
    raw: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    /// Seed of the per-fluid split shuffle [default: 0]
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct SynthArgs {
    #[command(flatten)]
    out: OutArg,
    /// [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 10]
    #[arg(long)]
    frames_per_modality: Option<usize>,
    /// Frame height in pixels [default: 256]
    #[arg(long)]
    height: Option<usize>,
    /// Frame width in pixels [default: 256]
    #[arg(long)]
    width: Option<usize>,
    /// Preset per fluid, e.g. `water=gas_like`; repeatable
    #[arg(long, value_name = "FLUID=PRESET")]
    preset: Vec<String>,
    /// Override the noise sigma of every preset
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// foundation, unet or threshold [default: foundation]
    #[arg(long)]
    backend: Option<Backend>,
    /// Checkpoint path or registry identifier
    #[arg(long)]
    checkpoint: Option<String>,
    /// Patch side for newly initialised models [default: 256]
    #[arg(long)]
    patch_resolution: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    unet_depth: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    unet_width: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate [default: 1e-5, U-Net 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// [default: 4]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 1.0]
    #[arg(long)]
    clip_max_norm: Option<f64>,
    /// Plateau epochs before the learning rate drops [default: 3]
    #[arg(long)]
    patience: Option<usize>,
    /// Learning-rate reduction factor [default: 0.1]
    #[arg(long)]
    lr_factor: Option<f64>,
    /// Learning-rate floor [default: 1e-8]
    #[arg(long)]
    min_lr: Option<f64>,
    /// Half-precision forward pass with dynamic loss scaling
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mixed_precision: Option<bool>,
}

#[derive(Args, Debug, Default)]
struct GridArgs {
    /// Grid cell side in frame pixels [default: 100]
    #[arg(long)]
    cell_size: Option<usize>,
    /// Maximum prompt box jitter during training [default: 5]
    #[arg(long)]
    box_jitter: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct ProposalArgs {
    /// Prompt each cell with the tight box of this backend's mask (unet)
    #[arg(long)]
    proposal_backend: Option<Backend>,
    /// Checkpoint of the proposal backend
    #[arg(long)]
    proposal_checkpoint: Option<String>,
}

#[derive(Args, Debug, Default)]
struct TrainCmdArgs {
    /// [default: <out>/manifests/manifest.jsonl]
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Fluids to train on; repeatable [default: all in the manifest]
    #[arg(long)]
    modality: Vec<ModalityName>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct InferArgs {
    /// Frame image or directory of frames
    #[arg(long)]
    input: PathBuf,
    /// Blank reference frame subtracted from every input
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    proposal: ProposalArgs,
}

#[derive(Args, Debug, Default)]
struct EvalArgs {
    /// [default: <out>/manifests/manifest.jsonl]
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    proposal: ProposalArgs,
    /// [default: test]
    #[arg(long)]
    split: Option<Split>,
    /// Fluids to score; repeatable [default: all in the manifest]
    #[arg(long)]
    modality: Vec<ModalityName>,
    /// Also write predicted masks
    #[arg(long)]
    save_masks: bool,
}

#[derive(Args, Debug, Default)]
struct ExperimentArgs {
    /// zero_shot, multi_modality or unet_comparison
    kind: Option<ExperimentKind>,
    /// Re-run the experiment recorded in a `run.json`
    #[arg(long, value_name = "FILE", conflicts_with = "kind")]
    from_run: Option<PathBuf>,
    /// [default: <out>/manifests/manifest.jsonl]
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    /// Pretrained promptable checkpoint [default: facebook/sam-vit-base]
    #[arg(long)]
    foundation_checkpoint: Option<String>,
    /// Initial U-Net weights [default: seeded initialisation]
    #[arg(long)]
    unet_checkpoint: Option<String>,
    #[command(flatten)]
    train: TrainArgs,
    /// U-Net epochs [default: same as --epochs]
    #[arg(long)]
    unet_epochs: Option<usize>,
    /// U-Net learning rate [default: 1e-3]
    #[arg(long)]
    unet_lr: Option<f64>,
    /// U-Net batch size [default: same as --batch-size]
    #[arg(long)]
    unet_batch_size: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    unet_depth: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    unet_width: Option<usize>,
    #[command(flatten)]
    grid: GridArgs,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct ReportArgs {
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug, Default)]
struct InitFoundationArgs {
    /// Checkpoint file to write
    #[arg(long, value_name = "FILE", required_unless_present = "registry_id")]
    output: Option<PathBuf>,
    /// Write into $HSVSEG_MODEL_DIR under this identifier instead
    #[arg(long, value_name = "ID", conflicts_with = "output")]
    registry_id: Option<String>,
    /// Embedding channels [default: 32]
    #[arg(long)]
    embed_dim: Option<usize>,
    /// [default: 256]
    #[arg(long)]
    patch_resolution: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

/// 1 for bad input or configuration, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<hsvseg::Error>() {
            return match e {
                hsvseg::Error::Io { .. }
                | hsvseg::Error::Image { .. }
                | hsvseg::Error::Csv(_)
                | hsvseg::Error::Json(_)
                | hsvseg::Error::Divergence { .. }
                | hsvseg::Error::Locked { .. } => 2,
                _ => 1,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = cli
        .config
        .as_deref()
        .map(ConfigFile::load)
        .transpose()
        .and_then(|cfg| commands::run(cli.command, &cfg.unwrap_or_default(), cli.dry_run));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
