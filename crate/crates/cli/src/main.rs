//! `sbir`: dataset generation, training, distillation, double-guidance
//! finetuning, evaluation, the RMAC ambiguity audit and metrics export.
//!
//! Exit codes: 0 on success, 1 on invalid input (flags, configs, files),
//! 2 when a run fails while computing.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<sbir_core::Error> for CliError {
    fn from(e: sbir_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sbir", version, about = "Sketch-based image retrieval experiments")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cross-domain dataset.
    GenData {
        /// SynthSpec JSON; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train photo and sketch encoders jointly with the relative triplet loss.
    TrainRtl {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Use the plain triplet loss instead.
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
    },
    /// Distill a student encoder from a trained teacher.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Teacher checkpoint or run directory.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// mse, mae, mse+mae, huber, kl or kl+softmax.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Finetune a distilled sketch student with the photo encoder and teacher as guides.
    FinetuneDg {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint or run directory with the photo encoder and sketch teacher.
        #[arg(long)]
        guides: Option<PathBuf>,
        /// Checkpoint or run directory whose sketch encoder is finetuned.
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Recall@k of a checkpoint on the test split.
    Eval {
        /// Checkpoint or run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Write the JSON record here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank the most similar photo pairs by RMAC descriptor distance.
    RmacAudit {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Descriptor dump to rank.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Dataset whose photos are described instead of a dump.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the computed descriptors here.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-serialize a run's metrics as CSV or JSON.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ObjectiveArg {
    Rtl,
    Triplet,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
