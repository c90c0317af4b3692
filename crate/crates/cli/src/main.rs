mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigError;

#[derive(Parser)]
#[command(name = "flagstack", version, about = "Train task models and stack their features into a disturbing-response flagger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the stacker decision threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write outputs here instead of a fresh directory under $FLAGSTACK_OUTPUT.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune one task model and save its best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
    },
    /// Score a checkpoint on the task's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Chunk-averaged task-model features for the response set.
    ExtractFeatures {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the logistic stacker on a feature file.
    Stack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
    },
    /// Stratified k-fold cross-validation of the stacker.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
    },
    /// Cross-validate every configured feature-group combination.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
    },
    /// Flag responses with a fitted stacker.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stacker: PathBuf,
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        text: Option<String>,
        /// JSON Lines file with `id` and `text` fields.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Print a stacker's feature weights as CSV, largest first.
    Report {
        #[arg(long)]
        stacker: PathBuf,
    },
    /// Features, ablation table, final stacker and per-task evaluation.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some() || matches!(e.downcast_ref::<flagstack::Error>(), Some(flagstack::Error::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, task } => commands::train(&common, &task),
        Command::Eval { common, task, checkpoint } => commands::eval(&common, &task, &checkpoint),
        Command::ExtractFeatures { common } => commands::extract(&common),
        Command::Stack { common, features } => commands::stack(&common, &features),
        Command::Crossval { common, features } => commands::crossval(&common, &features),
        Command::Ablate { common, features } => commands::ablate(&common, &features),
        Command::Predict { common, stacker, text, input } => commands::predict(&common, &stacker, text, input),
        Command::Report { stacker } => commands::report(&stacker),
        Command::Pipeline { common } => commands::pipeline(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
