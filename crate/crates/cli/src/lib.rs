//! Batch runner for crowd and LLM answer aggregation experiments.
//!
//! Every command reads a JSON run config (`--config`) and writes into an
//! output directory (`--out`), together with a `manifest.json` from which
//! `cams rerun` re-executes the same command.

pub mod commands;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use cams_core::embedding::EmbeddingError;
use cams_core::llm::LlmError;
use cams_core::metrics::MetricError;
use cams_core::model::DataError;
use cams_core::pipeline::PipelineError;
use cams_core::synthgen::SynthError;
use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

/// Validation failures exit with 2, provider and runtime failures with 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::Provider(_) | EmbeddingError::Io { .. } | EmbeddingError::CountMismatch { .. } => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::InvalidConfig(_) | LlmError::NoAnswers | LlmError::Data(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Cell { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Embedding(inner) => inner.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cams", version, about = "Aggregate crowd and LLM text answers and report their quality")]
pub struct Cli {
    /// JSON run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Scripted chat replies used instead of the HTTP endpoint.
    #[arg(long, global = true)]
    pub mock: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config's `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Validate the datasets and write per-role counts.
    Ingest,
    /// Build or extend the embedding store.
    Embed,
    /// Query the LLM ensemble and write its answers.
    LlmRun,
    /// Run every selection × aggregator cell.
    Aggregate,
    /// Score the cells and the individual workers.
    Evaluate,
    /// llm-run (if configured), embed, aggregate and evaluate.
    Report,
    /// Repeat the L.A. rows for several ensemble sizes.
    Sweep,
    /// Write a seeded synthetic three-role crowd with a ready run config.
    Synth {
        /// Synthetic crowd description; defaults to a small demo crowd.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Re-execute the command recorded in a manifest.
    Rerun { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Embed => "embed",
            Command::LlmRun => "llm-run",
            Command::Aggregate => "aggregate",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
            Command::Sweep => "sweep",
            Command::Synth { .. } => "synth",
            Command::Rerun { .. } => "rerun",
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    commands::dispatch(cli)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Validation(e.to_string()))?;
    run(cli)
}
