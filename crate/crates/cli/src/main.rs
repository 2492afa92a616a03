//! `detjac`: detached-Jacobian analyses of small decoder models.
//!
//! Exit status: 0 on success, 1 for usage errors, 2 for bad input data,
//! 3 for numeric failures.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use report::Format;

#[derive(Parser)]
#[command(name = "detjac", version, about = "Detached-Jacobian analyses of small decoder models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct the output from the detached and the standard Jacobian.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Also write both Jacobians, the frozen state and the input to this container.
        #[arg(long)]
        export_tensors: Option<PathBuf>,
    },
    /// Singular spectra and decoded singular vectors per input position.
    Svd {
        #[command(flatten)]
        common: Common,
        /// Analyse the layer output instead of the final output.
        #[arg(long)]
        layer: Option<usize>,
        /// Singular vector pairs to decode.
        #[arg(long, default_value_t = 3)]
        rank: usize,
        #[arg(long, value_enum, default_value_t = LeftSpaceArg::Unembedding)]
        left_space: LeftSpaceArg,
        #[arg(long)]
        export_tensors: Option<PathBuf>,
    },
    /// Stable ranks and spectra through the layers, with projections onto the final output.
    Layers {
        #[command(flatten)]
        common: Common,
    },
    /// Largest rows and columns of one Jacobian block, decoded to tokens.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layer: Option<usize>,
        /// Input position of the block; defaults to the last.
        #[arg(long)]
        position: Option<usize>,
        /// Rows and columns to report.
        #[arg(long, default_value_t = 5)]
        count: usize,
    },
    /// Greedy generation with and without a steering operator.
    Steer {
        #[command(flatten)]
        common: Common,
        /// Prompt the steering operator is computed from.
        #[arg(long)]
        steer_prompt: String,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 8)]
        n_tokens: usize,
        #[arg(long, value_enum, default_value_t = AlignmentArg::ClampLast)]
        alignment: AlignmentArg,
        #[arg(long)]
        first_step_only: bool,
    },
    /// Generate a seeded tiny model bundle.
    GenModel {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 2)]
        kv_heads: usize,
        #[arg(long)]
        d_ff: Option<usize>,
        #[arg(long, default_value_t = 128)]
        vocab: usize,
        #[arg(long, default_value = "swiglu")]
        activation: String,
        /// Fit the unembedding to the bundled corpus.
        #[arg(long)]
        trained: bool,
        #[arg(long)]
        tied: bool,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Args)]
struct Common {
    /// Model bundle; without it a trained model is generated from `--seed`.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prompt text, tokenized with the toy vocabulary.
    #[arg(long, conflicts_with = "tokens")]
    prompt: Option<String>,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<usize>>,
    /// Do not prepend `<bos>` to `--prompt`.
    #[arg(long)]
    no_bos: bool,
    /// Tokens per decoded vector.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LeftSpaceArg {
    Unembedding,
    InputEmbedding,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignmentArg {
    Exact,
    Truncate,
    ClampLast,
    LastPositionOnly,
}

/// Failure with its exit status.
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<detjac::Error> for Failure {
    fn from(e: detjac::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind, msg) = match f {
                Failure::Usage(m) => (1, "usage", m),
                Failure::Data(m) => (2, "error", m),
                Failure::Numeric(m) => (3, "numeric error", m),
            };
            eprintln!("detjac: {kind}: {msg}");
            ExitCode::from(code)
        }
    }
}
