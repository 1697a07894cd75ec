//! `hseg`: model summary, gradient checks, training, evaluation, inference and synthetic data.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigFile;

/// A user-input problem (exit code 1) as opposed to a runtime failure (exit code 2).
#[derive(Debug)]
pub struct Validation(pub String);

impl Validation {
    pub fn new(msg: impl Into<String>) -> Self {
        Validation(msg.into())
    }
}

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Validation {}

#[derive(Parser, Debug)]
#[command(name = "hseg", version, about = "Hybrid deformable/mixed-depthwise vessel segmentation")]
pub struct Cli {
    /// key = value file supplying defaults for the subcommand's flags
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parameter count, MACs and checkpoint size
    Summary(SummaryArgs),
    /// Finite-difference check of every backward pass
    Gradcheck(GradcheckArgs),
    /// Train with early stopping
    Train(TrainArgs),
    /// Per-image metrics of a checkpoint
    Eval(EvalArgs),
    /// Probability map of one image
    Infer(InferArgs),
    /// Write a synthetic vessel dataset
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct SummaryArgs {
    /// WxH, both multiples of 16
    #[arg(long)]
    pub input_size: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub tol: Option<f64>,
    /// First seed; each case runs `--seeds` consecutive seeds
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub seeds: Option<u64>,
    /// f64 or f32 analytic pass
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root with images/ and masks/ (optional for synth)
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Supervise only the final head
    #[arg(long)]
    pub no_mixed_loss: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub loss_weight: Option<f64>,
    /// on/off (default: on, off for synth)
    #[arg(long)]
    pub augment: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// In-memory synthetic images when no --data is given
    #[arg(long)]
    pub synth_count: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// train, test or all (default: test, all for synth)
    #[arg(long)]
    pub split: Option<String>,
    /// Also write the CSV here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resize rule to apply (default synth: keep native size)
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use hybridseg::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<Validation>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) | E::Indivisible { .. } | E::InvalidSpec { .. } | E::ShapeMismatch { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    hybridseg::par::init_from_env();
    let file = match cli.config.as_deref().map(ConfigFile::load).transpose() {
        Ok(f) => f.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match commands::run(cli.command, &file) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
