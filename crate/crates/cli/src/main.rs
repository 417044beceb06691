//! `etp`: corpus generation, pre-training and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or input files (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Failure while running (exit 1).
    #[error("{0}")]
    Runtime(String),
}

#[derive(Parser, Debug)]
#[command(name = "etp", version, about = "ECG-text contrastive pre-training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Run config file of `key = value` lines (`#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=0.001`. Repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic corpus as JSONL and print its class histogram.
    GenData {
        /// Number of records.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// `ptbxl5`, `cpsc9`, or a taxonomy file of `CODE<TAB>name` lines.
        #[arg(long, default_value = "ptbxl5")]
        taxonomy: String,
        /// Samples per lead.
        #[arg(long, default_value_t = 512)]
        length: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a corpus into train/val/test JSONL files.
    Split {
        /// Corpus to split (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Training fraction.
        #[arg(long, default_value_t = 0.8)]
        train: f64,
        /// Validation fraction.
        #[arg(long, default_value_t = 0.1)]
        val: f64,
        /// Test fraction.
        #[arg(long, default_value_t = 0.1)]
        test: f64,
        /// Shuffle seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving train.jsonl, val.jsonl and test.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-modal ECG-text pre-training.
    Pretrain(PretrainArgs),
    /// Augmentation-based ECG-only pre-training.
    PretrainSsl(PretrainArgs),
    /// Zero-shot classification against one prompt per class.
    Zeroshot {
        /// Checkpoint file, or `random` for a fresh seeded model.
        #[arg(long)]
        checkpoint: String,
        /// Labelled JSONL records to classify.
        #[arg(long)]
        data: PathBuf,
        /// `ptbxl5`, `cpsc9`, or a taxonomy file.
        #[arg(long, default_value = "ptbxl5")]
        taxonomy: String,
        /// Prompt template file (`taxonomy = template` lines); defaults to the built-in template.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Precomputed prompt embeddings keyed by class code (external text backbone only).
        #[arg(long)]
        text_embeddings: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for report.json and report.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on frozen encoder features.
    LinearEval {
        /// Checkpoint file, or `random` for a fresh seeded model.
        #[arg(long)]
        checkpoint: String,
        /// Probe training records (JSONL).
        #[arg(long)]
        train: PathBuf,
        /// Probe test records (JSONL).
        #[arg(long)]
        test: PathBuf,
        /// `ptbxl5`, `cpsc9`, or a taxonomy file.
        #[arg(long, default_value = "ptbxl5")]
        taxonomy: String,
        /// Probe training epochs.
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        /// Probe Adam learning rate.
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        /// Probe minibatch size.
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Probe initialization and shuffle seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for report.json and report.txt.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training corpus (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for run.json, ckpt.etpc and log.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Precomputed report embeddings keyed by record id (external text backbone only).
    #[arg(long)]
    pub text_embeddings: Option<PathBuf>,
    /// Continue from a checkpoint; only `epochs` and `checkpoint_every` may differ from its config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("ETP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("ETP_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    use etp_core::trainer::Objective;
    match cli.command {
        Command::GenData {
            n,
            taxonomy,
            length,
            seed,
            out,
        } => commands::gen_data(n, &taxonomy, length, seed, &out),
        Command::Split {
            data,
            train,
            val,
            test,
            seed,
            out,
        } => commands::split(&data, (train, val, test), seed, &out),
        Command::Pretrain(a) => commands::pretrain(Objective::Etp, &a, threads()?),
        Command::PretrainSsl(a) => commands::pretrain(Objective::Ssl, &a, threads()?),
        Command::Zeroshot {
            checkpoint,
            data,
            taxonomy,
            prompts,
            text_embeddings,
            config,
            out,
        } => commands::zeroshot(&checkpoint, &data, &taxonomy, prompts.as_deref(), text_embeddings.as_deref(), &config, &out),
        Command::LinearEval {
            checkpoint,
            train,
            test,
            taxonomy,
            epochs,
            lr,
            batch_size,
            seed,
            config,
            out,
        } => {
            let probe = etp_core::evalkit::ProbeConfig {
                epochs,
                lr,
                batch_size,
                weight_decay: 0.0,
                seed,
            };
            commands::linear_eval(&checkpoint, &train, &test, &taxonomy, &probe, &config, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
