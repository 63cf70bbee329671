//! `mesa`: position matrices, chunk plans, threshold scans, chunked
//! generation runs, passkey corpora and benchmarks.
//!
//! Every flag can also come from a `MESA_*` environment variable or from the
//! TOML file given by `--config`. A flag beats its variable, which beats the
//! file, which beats the built-in default.

mod alloc;
mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[global_allocator]
static GLOBAL: alloc::CountingAlloc = alloc::CountingAlloc;

#[derive(Debug, Parser)]
#[command(name = "mesa", version, about = "Positional weaving and chunked long-context inference toolkit")]
pub struct Cli {
    /// TOML file with default values, keyed by the flag names (N, E, F, ...).
    #[arg(long, global = true, env = "MESA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Directory receiving every output file [default: out]
    #[arg(long, global = true, env = "MESA_OUT")]
    pub out: Option<PathBuf>,
    /// [default: 0]
    #[arg(long, global = true, env = "MESA_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the woven-distance matrix of a scheme.
    GenPositions(GenPositionsArgs),
    /// Print and save the chunk plan for an input length.
    Plan(PlanArgs),
    /// Scan a hand-built threshold construction over positions.
    VerifyTheory(VerifyTheoryArgs),
    /// Chunked prefill plus greedy decoding on a small model.
    Run(RunArgs),
    /// Generate (and optionally evaluate) a passkey retrieval corpus.
    Passkey(PasskeyArgs),
    /// Exact attention-cell counts and wall-clock timings per method.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl From<ExecMode> for mesa_core::Parallelism {
    fn from(m: ExecMode) -> Self {
        match m {
            ExecMode::Sequential => mesa_core::Parallelism::Sequential,
            ExecMode::Parallel => mesa_core::Parallelism::Parallel,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct WeaveArgs {
    /// nope, rope, alibi, approx-alibi, rerope, leaky-rerope, stair, self-extend [default: stair]
    #[arg(long, env = "MESA_SCHEME")]
    pub scheme: Option<String>,
    /// Weave point [default: 512]
    #[arg(long = "N", env = "MESA_N")]
    pub big_n: Option<u64>,
    /// Stair step width (stair only) [default: 50]
    #[arg(long = "E", env = "MESA_E")]
    pub e: Option<u64>,
    /// Slope past the weave point (leaky-rerope only) [default: 1]
    #[arg(long = "k-inv", env = "MESA_K_INV")]
    pub k_inv: Option<f64>,
    /// Neighbor window (self-extend only) [default: 512]
    #[arg(long = "W", env = "MESA_W")]
    pub w: Option<usize>,
    /// Group size (self-extend only) [default: 50]
    #[arg(long = "G", env = "MESA_G")]
    pub g: Option<usize>,
    /// RoPE base [default: 10000]
    #[arg(long = "theta-base", env = "MESA_THETA_BASE")]
    pub theta_base: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SplitArgs {
    /// First-chunk length [default: 100]
    #[arg(long = "F", env = "MESA_F")]
    pub f: Option<usize>,
    /// Minimum last-chunk length [default: 512]
    #[arg(long = "L", env = "MESA_L")]
    pub l: Option<usize>,
    /// Largest remainder folded into the last chunk [default: 200]
    #[arg(long = "M-max", alias = "M_max", env = "MESA_M_MAX")]
    pub m_max: Option<usize>,
    /// Training window [default: 4096]
    #[arg(long = "T", alias = "T-train", env = "MESA_T")]
    pub t: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Model width [default: 16]
    #[arg(long, env = "MESA_D")]
    pub d: Option<usize>,
    /// Attention heads per layer [default: 2]
    #[arg(long, env = "MESA_HEADS")]
    pub h: Option<usize>,
    /// [default: 8]
    #[arg(long = "head-dim", env = "MESA_HEAD_DIM")]
    pub head_dim: Option<usize>,
    /// [default: 2]
    #[arg(long, env = "MESA_LAYERS")]
    pub layers: Option<usize>,
    /// [default: 64]
    #[arg(long, env = "MESA_VOCAB")]
    pub vocab: Option<usize>,
    /// Load weights from a JSON file instead of drawing them from --seed.
    #[arg(long, env = "MESA_WEIGHTS")]
    pub weights: Option<PathBuf>,
    /// nope, rope, alibi or linear [default: rope]
    #[arg(long, env = "MESA_PE")]
    pub pe: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenPositionsArgs {
    #[command(flatten)]
    pub weave: WeaveArgs,
    /// Sequence length
    #[arg(long = "n", env = "MESA_LEN")]
    pub n: Option<usize>,
    /// [default: csv]
    #[arg(long, value_enum, env = "MESA_FORMAT")]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub split: SplitArgs,
    /// Input length
    #[arg(long = "I", env = "MESA_I")]
    pub i: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyTheoryArgs {
    /// 1, 2, 3 or c [default: 1]
    #[arg(long, env = "MESA_THEOREM")]
    pub theorem: Option<String>,
    /// Effective window length [default: 8]
    #[arg(long = "M", env = "MESA_M")]
    pub m: Option<usize>,
    /// Threshold [default: 0]
    #[arg(long = "H", env = "MESA_H")]
    pub h: Option<f64>,
    /// Weave point for theorems 3 and c [default: 2]
    #[arg(long = "N", env = "MESA_N")]
    pub big_n: Option<u64>,
    /// Stair step width for theorem c [default: 2]
    #[arg(long = "E", env = "MESA_E")]
    pub e: Option<u64>,
    /// Last scanned position [default: 700, or the rescue horizon for 3 and c]
    #[arg(long = "T-max", alias = "T_max", env = "MESA_T_MAX")]
    pub t_max: Option<usize>,
    /// Constant query-key offset of the second layer [default: 0]
    #[arg(long, env = "MESA_TAU")]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub weave: WeaveArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of random input tokens
    #[arg(long = "I", env = "MESA_I", conflicts_with = "input")]
    pub i: Option<usize>,
    /// Whitespace-tokenized text file used as input
    #[arg(long, env = "MESA_INPUT")]
    pub input: Option<PathBuf>,
    /// [default: 16]
    #[arg(long = "max-new", env = "MESA_MAX_NEW")]
    pub max_new: Option<usize>,
    /// [default: parallel]
    #[arg(long, value_enum, env = "MESA_EXEC")]
    pub exec: Option<ExecMode>,
}

#[derive(Debug, Args)]
pub struct PasskeyArgs {
    #[command(flatten)]
    pub weave: WeaveArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Target word counts [default: 1024,2048,4096]
    #[arg(long, value_delimiter = ',', env = "MESA_TARGETS")]
    pub targets: Option<Vec<usize>>,
    /// Samples per target [default: 5]
    #[arg(long, env = "MESA_SAMPLES")]
    pub samples: Option<usize>,
    /// Passkey digits [default: 5]
    #[arg(long, env = "MESA_DIGITS")]
    pub digits: Option<usize>,
    /// Run every sample through the model and score retrieval.
    #[arg(long, env = "MESA_EVALUATE")]
    pub evaluate: bool,
    /// Tokens generated per sample when evaluating [default: 8]
    #[arg(long = "max-new", env = "MESA_MAX_NEW")]
    pub max_new: Option<usize>,
    /// [default: parallel]
    #[arg(long, value_enum, env = "MESA_EXEC")]
    pub exec: Option<ExecMode>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub weave: WeaveArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// vanilla, mesa, lambda, sink, rerope_dual [default: all]
    #[arg(long = "method", value_delimiter = ',', env = "MESA_METHODS")]
    pub methods: Option<Vec<String>>,
    /// Input lengths [default: 1024,2048,4096]
    #[arg(long = "n", value_delimiter = ',', env = "MESA_LENGTHS")]
    pub lengths: Option<Vec<usize>>,
    /// [default: 1]
    #[arg(long, env = "MESA_REPEATS")]
    pub repeats: Option<usize>,
    /// Greedy steps timed after each prefill [default: 4]
    #[arg(long = "decode-tokens", env = "MESA_DECODE_TOKENS")]
    pub decode_tokens: Option<usize>,
    /// Skip the timed runs and write only the cell counts.
    #[arg(long = "cells-only", env = "MESA_CELLS_ONLY")]
    pub cells_only: bool,
    /// [default: parallel]
    #[arg(long, value_enum, env = "MESA_EXEC")]
    pub exec: Option<ExecMode>,
}

/// Bad flag combinations and unreadable config files. Exits with 2.
#[derive(Debug)]
pub struct UsageError {
    pub kind: &'static str,
    pub message: String,
}

impl UsageError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        UsageError {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for UsageError {}

fn report(kind: &str, message: &str, code: u8) -> ExitCode {
    let record = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{record}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                e.exit()
            }
            _ => return report("usage", e.render().to_string().trim(), 2),
        },
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message = format!("{err:#}");
            if let Some(u) = err.downcast_ref::<UsageError>() {
                report(u.kind, &message, 2)
            } else if let Some(e) = err.downcast_ref::<mesa_core::Error>() {
                report(e.kind(), &message, 1)
            } else {
                report("io", &message, 1)
            }
        }
    }
}
