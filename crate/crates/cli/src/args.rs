// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line flags.
//!
//! Primitive settings are `Option`s so that a value can come from the flag,
//! the optional `--config` file, or the built-in default, in that order.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "TUNEDLENS_OUT";
/// Output directory when neither `--out` nor the environment variable is set.
pub const DEFAULT_OUT: &str = "tunedlens-out";

#[derive(Debug, Parser)]
#[command(name = "tunedlens", version, about = "Logit-lens and tuned-lens workbench")]
pub struct Cli {
    /// TOML file with per-command defaults (`[synth]`, `[train]`, ...).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the reference model, generate a multilingual corpus and capture activations.
    Synth(SynthArgs),
    /// Train a tuned lens on an activation dump.
    Train(TrainArgs),
    /// Evaluate one or more lenses and export metrics, heatmaps and deltas.
    Eval(EvalArgs),
    /// Decode a single sequence layer by layer.
    Probe(ProbeArgs),
    /// Serve probes over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
}

impl OutArg {
    #[must_use]
    pub fn dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Residual width [default: 32].
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Number of transformer blocks [default: 4].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads per block; must divide the width [default: 4].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Vocabulary size [default: 64].
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Longest sequence the model accepts [default: 64].
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// Apply an RMS norm before the unembedding (`true`/`false`).
    #[arg(long)]
    pub final_norm: Option<bool>,
    /// Comma-separated language tags [default: bn,en,hi].
    #[arg(long)]
    pub langs: Option<String>,
    /// Number of sequences, languages assigned round-robin [default: 300].
    #[arg(long)]
    pub seqs: Option<usize>,
    /// Tokens per sequence [default: 32].
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Seeds both the model weights and the corpus [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Activation dump written by `synth`.
    #[arg(long)]
    pub activations: PathBuf,
    /// Optimizer steps per layer [default: 1000].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sequences per batch [default: 8].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seeds batch shuffling and position sampling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// `all`, `last` or `sampled-K` [default: all].
    #[arg(long)]
    pub positions: Option<String>,
    /// Train one lens per language tag.
    #[arg(long)]
    pub per_language: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Activation dump to evaluate on.
    #[arg(long)]
    pub activations: PathBuf,
    /// `logit`, `identity`, `PATH` or `ID=PATH`; repeatable. Deltas are taken against the first.
    #[arg(long = "lens", required = true)]
    pub lenses: Vec<String>,
    /// JSON array of `{sequence, gold_token_index, answer_position}`; switches ranks to gold mode.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Width of position buckets [default: 1].
    #[arg(long)]
    pub bucket: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["tokens", "text"])))]
pub struct ProbeArgs {
    /// `model.json` written by `synth`.
    #[arg(long)]
    pub model: PathBuf,
    /// `logit`, `identity` or a checkpoint path.
    #[arg(long)]
    pub lens: String,
    /// Comma-separated token ids.
    #[arg(long)]
    pub tokens: Option<String>,
    /// Whitespace-separated words looked up in `--table`.
    #[arg(long, requires = "table")]
    pub text: Option<String>,
    /// TSV `id<TAB>text` string table.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Candidates per cell [default: 5].
    #[arg(long)]
    pub top_k: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// `model.json` written by `synth`.
    #[arg(long)]
    pub model: PathBuf,
    /// `logit`, `identity`, `PATH` or `ID=PATH`; repeatable.
    #[arg(long = "lens", required = true)]
    pub lenses: Vec<String>,
    /// TCP port [default: 8080].
    #[arg(long)]
    pub port: Option<u16>,
    /// Listen address [default: 127.0.0.1].
    #[arg(long)]
    pub bind: Option<String>,
    /// TSV string table used for display and `text` requests.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Longest accepted sequence; defaults to the model's `max_seq`.
    #[arg(long)]
    pub max_tokens: Option<usize>,
}
