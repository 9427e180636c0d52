//! `lgmm` — train, evaluate, and inspect the fine-grained retrieval engine.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lgmm_core::Error;

#[derive(Parser)]
#[command(
    name = "lgmm",
    version,
    about = "Fine-grained bimodal retrieval over local feature matrices",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic-event dataset: feature packs plus manifest.
    GenSynthetic(GenSyntheticArgs),
    /// Train projection heads; writes a checkpoint and a metrics log.
    Train(TrainArgs),
    /// Score a dataset and print retrieval metrics.
    Evaluate(EvaluateArgs),
    /// Train the four loss configurations and print a comparison table.
    Ablate(AblateArgs),
    /// Emit per-unit alignment scores of one query against candidates.
    DumpAlignment(DumpAlignmentArgs),
    /// Run the finite-difference gradient suite and report the worst error.
    GradCheck(GradCheckArgs),
    /// Print a feature pack's header and per-item shapes.
    PackInspect(PackInspectArgs),
}

/// Hyperparameters shared across commands. Precedence: flag, then config
/// file, then built-in default.
#[derive(Args, Clone, Default)]
struct HyperArgs {
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Attention softmax temperature.
    #[arg(long)]
    tau_w: Option<f64>,
    /// Temperature for the soft-supervision KL distributions.
    #[arg(long)]
    tau_kl: Option<f64>,
    /// LogSumExp pooling sharpness.
    #[arg(long)]
    lambda: Option<f64>,
    /// Soft-label mixing weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Projection head hidden width.
    #[arg(long)]
    d_hidden: Option<usize>,
    /// Shared-space dimensionality of the projection heads.
    #[arg(long)]
    d_shared: Option<usize>,
    /// JSON config file supplying any of the hyperparameter flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// Output directory for audio.lgf, text.lgf, and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Split tag written into the manifest.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    events_per_item: Option<usize>,
    #[arg(long)]
    frames_per_event: Option<usize>,
    #[arg(long)]
    words_per_event: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    hard_negative_fraction: Option<f64>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Optional held-out manifest for the per-epoch validation metric.
    #[arg(long)]
    valid_manifest: Option<PathBuf>,
    /// Output prefix; writes <out>.ckpt and <out>.metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Drop the soft-supervision KL term.
    #[arg(long)]
    disable_jnt: bool,
    /// Drop the intra-modal contrastive term.
    #[arg(long)]
    disable_intrac: bool,
    /// Drop the rectifier after the final projection layer.
    #[arg(long)]
    no_final_relu: bool,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset manifest to evaluate.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint with trained heads; raw features are scored when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Aggregation mode: lgmm, max-mean, max-max, mean-mean, mean-max.
    #[arg(long)]
    mode: Option<String>,
    /// directional (query side scores) or symmetric (mean of both).
    #[arg(long)]
    direction: Option<String>,
    /// Also write the metric records to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset manifest; the committed synthetic suite when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Also write the comparison table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct DumpAlignmentArgs {
    /// Dataset manifest holding the query and candidate items.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint with trained heads; raw features are used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Audio item id to use as the query.
    #[arg(long, conflicts_with = "query_text")]
    query_audio: Option<String>,
    /// Caption id to use as the query.
    #[arg(long)]
    query_text: Option<String>,
    /// Comma-separated candidate ids; all opposite-modality items when absent.
    #[arg(long, value_delimiter = ',')]
    contexts: Vec<String>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct PackInspectArgs {
    /// Feature pack file.
    pack: PathBuf,
}

// Every failure class maps to its own exit status:
//   2 usage (clap), 3 i/o, 4 container/json parse, 5 dataset validation,
//   6 config/contract, 7 unknown id, 8 numeric/shape, 9 gradient check
//   exceeded its threshold.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 3,
        Error::Pack { .. } | Error::Json(_) => 4,
        Error::Validation(_) => 5,
        Error::Config(_) | Error::Contract(_) => 6,
        Error::UnknownId(_) => 7,
        Error::DimMismatch { .. }
        | Error::Shape { .. }
        | Error::NonFinite(_)
        | Error::NonFiniteGradient(_) => 8,
    }
}

const GRAD_CHECK_FAILED: u8 = 9;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic(args) => commands::gen_synthetic(args),
        Command::Train(args) => commands::train(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::DumpAlignment(args) => commands::dump_alignment(args),
        Command::GradCheck(args) => commands::grad_check(args),
        Command::PackInspect(args) => commands::pack_inspect(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
