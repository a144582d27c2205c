//! The `cptr` command line.

pub mod commands;
pub mod config;
pub mod render;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Preset;

#[derive(Debug, Parser)]
#[command(name = "cptr", version, about = "Convolution-free transformer image captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-entropy training from a manifest.
    Train(TrainArgs),
    /// Self-critical fine-tuning of a checkpoint with CIDEr-D rewards.
    FinetuneScst(FinetuneArgs),
    /// Caption one image.
    Caption(CaptionArgs),
    /// Decode a split and report BLEU-1..4 and CIDEr-D as JSON.
    Eval(EvalArgs),
    /// Write every attention map for one image to a dump file.
    DumpAttention(DumpArgs),
    /// Overlay one attention row from a dump on its image.
    RenderAttention(RenderArgs),
    /// Generate the synthetic shapes corpus.
    GenToyData(ToyArgs),
}

/// Options shared by the commands that read a config file.
#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// JSON file with optional `model`, `train` and `decode` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in defaults the config file is applied over.
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints, metrics.jsonl, vocab.txt and config.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of cross-entropy epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Minimum training-caption count for a word to enter the vocabulary.
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Number of SCST epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct DecodeArgs {
    /// Beam width; 1 decodes greedily.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Longest caption in tokens, EOS included.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// P6 PPM image.
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Also write the attention maps of the generated caption here.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Required unless `--candidates` is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: cptr_core::data::manifest::Split,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Skip unreadable images instead of failing.
    #[arg(long)]
    pub allow_missing: bool,
    /// Score captions from a JSON array of strings, in split order, instead of decoding.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Also write the generated captions (JSON array) here.
    #[arg(long)]
    pub captions_out: Option<PathBuf>,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Decoding threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Trace this caption instead of the decoded one.
    #[arg(long)]
    pub caption: Option<String>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub dump: PathBuf,
    /// The image the dump was taken from, at model resolution.
    #[arg(long)]
    pub image: PathBuf,
    /// encoder-self or decoder-cross.
    #[arg(long)]
    pub stack: cptr_core::model::Stack,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    /// Query patch index (encoder-self) or caption position (decoder-cross).
    #[arg(long, default_value_t = 0)]
    pub query: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub val: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::FinetuneScst(a) => commands::finetune(a),
        Command::Caption(a) => commands::caption(a),
        Command::Eval(a) => commands::eval(a),
        Command::DumpAttention(a) => commands::dump_attention(a),
        Command::RenderAttention(a) => commands::render_attention(a),
        Command::GenToyData(a) => commands::gen_toy(a),
    }
}
