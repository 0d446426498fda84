// SPDX-License-Identifier: MIT OR Apache-2.0

//! `dem`: batch front end for tracing, editing and evaluating toy
//! transformer checkpoints.
//!
//! Each run writes into `<out>/<command>-<hash>/`, where the hash covers
//! the command's configuration and the hashes of its input files, and
//! finishes with a `manifest.json`. Standard output only carries
//! human-readable tables.

mod commands;
mod run_dir;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dem_core::editor::{EditMode, KeyPosition};
use dem_core::DemError;

pub use run_dir::sha256_hex;

/// A failure with its exit code: 2 for usage and validation problems, 1 for
/// runtime failures.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::runtime(format!("{}: {e}", path.display()))
    }

    /// Prefixes the message, keeping the code.
    fn context(self, what: impl std::fmt::Display) -> Self {
        Self {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl From<DemError> for CliError {
    fn from(e: DemError) -> Self {
        let code = match e {
            DemError::Config(_)
            | DemError::InvalidInput(_)
            | DemError::Record { .. }
            | DemError::UnknownRelation(_)
            | DemError::Format(_)
            | DemError::Lineage(_)
            | DemError::Json(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dem", version, about = "Trace, edit and evaluate toy transformer checkpoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Causal traces, recall profiles and located layers per record.
    Trace(TraceArgs),
    /// Apply edits in order and write the edited model plus one receipt per record.
    Edit(EditArgs),
    /// Score an edited model against the original.
    Eval(EvalArgs),
    /// Check a JSONL record file.
    DatasetValidate(DatasetArgs),
    /// Generate the toy corpus and train the reference toy model.
    ToyInit(ToyInitArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelInputs {
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    /// Vocabulary file [default: vocab.txt next to the model].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// JSONL records.
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to these case ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub cases: Vec<u64>,
}

impl ModelInputs {
    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| {
            self.model
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("vocab.txt")
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct Output {
    /// Base output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub output: Output,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3.0)]
    pub sigma_mult: f64,
    /// Tokens restored around each site.
    #[arg(long, default_value_t = 1)]
    pub window: usize,
    /// Layers reported per kind.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "block,mlp,attn")]
    pub kinds: Vec<String>,
    /// Names substituted for PersonX/PersonY to decouple located layers.
    #[arg(long, value_delimiter = ',')]
    pub substitutes: Vec<String>,
}

fn parse_mode(s: &str) -> Result<EditMode, String> {
    s.parse().map_err(|e: DemError| e.to_string())
}

fn parse_key_position(s: &str) -> Result<KeyPosition, String> {
    s.parse().map_err(|e: DemError| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub output: Output,
    /// dem, fixed-layer, mlp-only or attn-only.
    #[arg(long, default_value = "dem", value_parser = parse_mode)]
    pub mode: EditMode,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Layer list for fixed-layer mode.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.0625)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Shift optimization steps.
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub step_size: f64,
    /// Shift norm limit relative to the hidden state.
    #[arg(long, default_value_t = 4.0)]
    pub clamp: f64,
    /// Prompt variants per edit.
    #[arg(long, default_value_t = 4)]
    pub prefixes: usize,
    /// subject-last or last-token.
    #[arg(long, default_value = "last-token", value_parser = parse_key_position)]
    pub key_position: KeyPosition,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Edited checkpoint.
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub output: Output,
    /// Checkpoint before editing.
    #[arg(long)]
    pub original: PathBuf,
    /// Directory holding `<case_id>.ksrc` receipts.
    #[arg(long)]
    pub receipts: PathBuf,
    /// Decode budget for neighborhood comparisons.
    #[arg(long, default_value_t = 8)]
    pub max_new: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Strip `___` and `&` markers before validating.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ToyInitArgs {
    #[command(flatten)]
    pub output: Output,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub records: usize,
    /// Training steps.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return e.exit_code();
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Trace(a) => commands::trace(a, out),
        Command::Edit(a) => commands::edit(a, out),
        Command::Eval(a) => commands::eval(a, out),
        Command::DatasetValidate(a) => commands::dataset_validate(a, out),
        Command::ToyInit(a) => commands::toy_init(a, out),
    }
}
