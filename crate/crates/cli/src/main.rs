//! `physiodecode` command-line front-end.
//!
//! Exit codes: 0 success, 2 config error, 3 missing artifact, 4 data error.

mod config;
mod stages;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use physiodecode::eval::ReportFormat;
use physiodecode::features::ModalityMask;
use thiserror::Error;

use config::{parse_alpha, RunConfig};
use stages::Ctx;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { stage: String, path: PathBuf },
    #[error("workdir is locked by another writer ({0}); remove the file if no other run is active")]
    Locked(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Data(#[from] physiodecode::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Locked(_) => 2,
            Self::Data(physiodecode::Error::InvalidParam { .. }) => 2,
            Self::MissingArtifact { .. } => 3,
            Self::Io(_) | Self::Data(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "physiodecode", version, about = "Multimodal driving-behaviour decoding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Debug, Args)]
struct Opts {
    /// Flat `key = value` config file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "PHYSIODECODE_WORKDIR")]
    workdir: Option<PathBuf>,
    /// Epoch file (EPB); defaults to epochs.epb in the workdir.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    elite_k: Option<usize>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// `tuned`, `reference`, `fixed:<value>` or a bare value in [0, 1].
    #[arg(long, global = true)]
    alpha: Option<String>,
    /// Modality mask for `ablate`, e.g. `eeg` or `eeg+emg`.
    #[arg(long, global = true)]
    mask: Option<String>,
    #[arg(long, global = true, default_value = "text")]
    format: String,
    /// Epochs per class for `synth`.
    #[arg(long, global = true)]
    n_per_class: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic epoch file.
    Synth,
    /// Preprocess, screen and extract features.
    Extract,
    /// Split, normalise and select elite features.
    Select,
    /// Tune both members and the blend weight.
    Tune,
    /// Train the ensemble.
    Train,
    /// Evaluate on the held-out rows.
    Evaluate,
    /// Modality ablation.
    Ablate,
    /// Global SHAP importance of the trained ensemble.
    Explain,
}

fn resolve(opts: &Opts) -> Result<(RunConfig, ReportFormat, Option<ModalityMask>), CliError> {
    let mut run = RunConfig::default();
    if let Some(path) = &opts.config {
        run.apply_file(path)?;
    }
    if let Some(v) = opts.seed {
        run.seed = v;
    }
    if let Some(v) = &opts.workdir {
        run.workdir = v.clone();
    }
    if let Some(v) = &opts.data {
        run.data = Some(v.clone());
    }
    if let Some(v) = opts.elite_k {
        run.elite_k = v;
    }
    if let Some(v) = opts.trials {
        run.trials = v;
    }
    if let Some(v) = opts.folds {
        run.folds = v;
    }
    if let Some(v) = &opts.alpha {
        run.alpha = parse_alpha(v)?;
    }
    if let Some(v) = opts.n_per_class {
        run.n_per_class = v;
    }
    let format: ReportFormat = opts.format.parse().map_err(|e: physiodecode::Error| CliError::Config(e.to_string()))?;
    let mask = opts
        .mask
        .as_deref()
        .map(|m| m.parse::<ModalityMask>().map_err(|e| CliError::Config(e.to_string())))
        .transpose()?;
    Ok((run, format, mask))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (run, format, mask) = resolve(&cli.opts)?;
    let pipeline = run.pipeline()?;
    let wd = workdir::Workdir::open(&run.workdir, run.hash())?;
    let ctx = Ctx {
        run,
        pipeline,
        wd,
        format,
        mask,
    };
    match cli.command {
        Command::Synth => stages::synth(&ctx),
        Command::Extract => stages::extract(&ctx),
        Command::Select => stages::select(&ctx),
        Command::Tune => stages::tune_stage(&ctx),
        Command::Train => stages::train_stage(&ctx),
        Command::Evaluate => stages::evaluate_stage(&ctx),
        Command::Ablate => stages::ablate(&ctx),
        Command::Explain => stages::explain(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
