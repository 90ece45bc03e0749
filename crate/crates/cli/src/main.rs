//! `fusionnet`: model summaries, ledger checks, training, evaluation and
//! Grad-CAM for the multilayer multimodal fusion networks.
//!
//! Exit codes: 0 success, 1 failed verification or runtime error, 2 usage
//! error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fusionnet_core::models::{Scale, Variant};

/// A usage problem detected after argument parsing (bad config values,
/// missing inputs). Reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

/// Set when a check ran to completion and failed. Reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("verification failed")]
pub struct VerificationFailed;

#[derive(Parser)]
#[command(
    name = "fusionnet",
    version,
    about = "Multilayer multimodal CNN fusion",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the layer table and parameter totals of a model.
    Summary(ModelArgs),
    /// Check a model against a `name,out_shape,params` ledger (built in for M4).
    VerifyTable(VerifyArgs),
    /// Plan the max-pool window and stride taking each source size to a target.
    PlanFdsfm(PlanArgs),
    /// Write a synthetic PNG dataset with a manifest.
    SynthData(SynthArgs),
    /// Train a model and evaluate its best checkpoint on the test split.
    Train(Box<TrainArgs>),
    /// Evaluate a trained run on its test split or on other data.
    Eval(EvalArgs),
    /// Grad-CAM heatmap of one image under a trained run.
    Gradcam(GradcamArgs),
    /// Compare analytic and central-difference gradients of a trainable twin.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "m4")]
    variant: Variant,
    #[arg(long, default_value = "full")]
    scale: Scale,
    /// Output classes of the head.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Expected rows; defaults to the embedded reference ledger (M4, full scale).
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Common output size.
    #[arg(long)]
    target: usize,
    /// Source map sizes.
    #[arg(required = true)]
    sources: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthTask {
    /// Blob / bands / noise, three classes.
    ThreeClass,
    /// Bright or dark blob in a random quadrant, two classes.
    Quadrants,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n_per_class: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "three-class")]
    task: SynthTask,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    scale: Option<Scale>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Falls back to FUSIONNET_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Random shear and zoom on training images.
    #[arg(long)]
    augment: bool,
    /// Class directory names, in label order.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Synthetic data with this many training samples per class.
    #[arg(long, conflicts_with = "data")]
    synth: Option<usize>,
    /// Dataset root with one PNG directory per class.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Permit full-scale training, whose backbones start untrained.
    #[arg(long)]
    allow_untrained_full: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Evaluate on a PNG dataset (all of it) instead of the run's test split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Target class; defaults to the predicted class.
    #[arg(long)]
    class: Option<usize>,
    /// Feature map to explain; defaults to the model's projection conv.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "m4")]
    variant: Variant,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = fusionnet_core::gradcheck::DEFAULT_STEP)]
    step: f64,
    /// Maximum relative error that passes.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Summary(a) => commands::summary(a.variant, a.scale, a.classes, a.json),
        Command::VerifyTable(a) => commands::verify_table(
            a.model.variant,
            a.model.scale,
            a.model.classes,
            a.ledger.as_deref(),
            a.model.json,
        ),
        Command::PlanFdsfm(a) => commands::plan_fdsfm(a.target, &a.sources),
        Command::SynthData(a) => {
            commands::synth_data(a.n_per_class, a.seed, matches!(a.task, SynthTask::Quadrants), &a.out)
        }
        Command::Train(a) => commands::train(*a),
        Command::Eval(a) => commands::eval(&a.run, a.data.as_deref(), &a.out),
        Command::Gradcam(a) => commands::gradcam(&a.run, &a.image, a.class, a.layer.as_deref(), &a.out),
        Command::Gradcheck(a) => commands::gradcheck(a.variant, a.seed, a.batch, a.step, a.tolerance),
    }
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<VerificationFailed>().is_some() => ExitCode::from(1),
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("error: {e}");
            eprintln!("run `fusionnet help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
