// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line surface. Path-valued fields are skipped when a resolved
//! configuration is serialized into a run manifest; inputs are recorded by
//! digest instead.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "xlg",
    version,
    about = "Expert-neuron analytics over activation dumps"
)]
pub struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true, env = "XLG_WORKERS", value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: Option<u32>,

    /// Key-value file supplying defaults for flags not given on the command line.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic catalog plus planted-expert activations (and optional hidden-state dumps).
    Synth(SynthArgs),
    /// Validates activation files against a catalog and writes an index.
    Ingest(IngestArgs),
    /// Average Precision expert scores per activation file.
    Experts(ExpertsArgs),
    /// Cross-lingual alignment report over expert score files.
    Align(AlignArgs),
    /// Language-identity probes over hidden-state dumps.
    Probe(ProbeArgs),
    /// Median-clamp intervention spec for one (concept, language).
    #[command(name = "steer-spec")]
    SteerSpec(SteerSpecArgs),
    /// Detected-language frequencies from generation records.
    #[command(name = "lang-freq")]
    LangFreq(LangFreqArgs),
    /// CSV bundle from alignment, probe and frequency reports.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Experts(_) => "experts",
            Command::Align(_) => "align",
            Command::Probe(_) => "probe",
            Command::SteerSpec(_) => "steer-spec",
            Command::LangFreq(_) => "lang-freq",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub concepts: u64,
    #[arg(long, value_delimiter = ',', default_value = "aa,bb,cc")]
    pub languages: Vec<String>,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_pos: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_neg: u64,
    /// Neurons per layer.
    #[arg(long, value_delimiter = ',', default_value = "2048,2048,2048,2048")]
    pub layer_sizes: Vec<usize>,
    /// Planted expert neurons per concept, shared by all its languages.
    #[arg(long, default_value_t = 100)]
    pub planted: usize,
    #[arg(long, default_value_t = 1.0)]
    pub signal: f32,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sd: f32,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_step: u64,
    #[arg(long, default_value = "synthetic")]
    pub model_id: String,
    /// Sentences per language in hidden-state dumps; 0 writes none.
    #[arg(long, default_value_t = 0)]
    pub hidden_sentences: usize,
    #[arg(long, default_value_t = 4)]
    pub hidden_layers: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden_dim: usize,
    /// First layer whose hidden states carry a language signal.
    #[arg(long, default_value_t = 2)]
    pub hidden_separable_from: usize,
    #[arg(long, default_value_t = 3.0)]
    pub hidden_separation: f32,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[serde(skip)]
    #[arg(long)]
    pub catalog: PathBuf,
    /// Directory of XLGA files.
    #[serde(skip)]
    #[arg(long)]
    pub activations: PathBuf,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExpertsArgs {
    /// One XLGA file, or a directory of them.
    #[serde(skip)]
    #[arg(long)]
    pub activations: PathBuf,
    /// Output XLGE file, or a directory when --activations is one.
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the top-k neurons next to each score file.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub top_k: Option<u64>,
    /// Columns per streamed block; 0 picks about 16 MiB.
    #[arg(long, default_value_t = 0)]
    pub block_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Corr,
    Mi,
    Overlap,
}

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    #[serde(skip)]
    #[arg(long)]
    pub experts_dir: PathBuf,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "corr,mi,overlap")]
    pub metrics: Vec<Metric>,
    /// Neighbours in the mutual-information estimator.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub mi_neighbors: u64,
    /// Language order of the matrices; sorted tags when omitted.
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    /// Keep the per-concept matrices in the report.
    #[arg(long)]
    pub per_concept: bool,
    #[arg(long)]
    pub no_layer_profile: bool,
    /// Also write one CSV per metric next to the report.
    #[arg(long)]
    pub csv: bool,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    /// Directory of token-pooled XLGA dumps; repeat for more checkpoints.
    #[serde(skip)]
    #[arg(long, required = true)]
    pub hidden_dir: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Inverse L2 strength on the summed loss.
    #[arg(long, default_value_t = 1.0)]
    pub inverse_regularization: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Also write per-layer accuracies as CSV next to the report.
    #[arg(long)]
    pub csv: bool,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SteerSpecArgs {
    /// XLGE expert scores.
    #[serde(skip)]
    #[arg(long)]
    pub experts: PathBuf,
    /// XLGA activations of the same (concept, language, checkpoint).
    #[serde(skip)]
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    #[arg(long)]
    pub hook_point: Option<String>,
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    #[arg(long, default_value_t = 0.8)]
    pub temperature: f64,
    #[arg(long, default_value_t = 64)]
    pub max_length: usize,
    #[arg(long, default_value_t = 100)]
    pub n_seeds: usize,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LangFreqArgs {
    /// GenerationRecord JSONL.
    #[serde(skip)]
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Alignment, probe or language-frequency JSON reports.
    #[serde(skip)]
    #[arg(required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[serde(skip)]
    #[arg(long)]
    pub out: PathBuf,
}
