mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nl2code::corpus::CorpusError;
use nl2code::model::ModelError;
use nl2code::tensor::TensorError;
use nl2code::tokenizer::TokenizerError;
use nl2code::training::{CheckpointError, TrainError};

/// Bad flags, config values or argument combinations (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "nl2code", version, about = "Train and evaluate natural-language to code models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset checks.
    #[command(subcommand)]
    Data(DataCommand),
    /// Subword vocabulary.
    #[command(subcommand)]
    Tokenizer(TokenizerCommand),
    /// Train a model on gold data, optionally interleaved with mined pairs.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Generate snippets for intents.
    Generate(GenerateArgs),
    /// Repeated random-split cross-validation.
    Cv(CvArgs),
    /// Write synthetic datasets in the on-disk formats.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Load each dataset and report counts.
    Validate(DataArgs),
}

#[derive(Subcommand)]
enum TokenizerCommand {
    /// Learn BPE merges over intents and snippets.
    Train(TokenizerArgs),
}

/// Config file, seed and dataset locations.
#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gold benchmark (JSON array).
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Mined pairs (JSON lines with `prob`).
    #[arg(long)]
    pub noisy: Option<PathBuf>,
    /// Description/labeling-function pairs (JSON lines).
    #[arg(long)]
    pub nl2lf: Option<PathBuf>,
    /// Vocabulary file.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum source and target length in tokens.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Passes over the gold data.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Gold:noisy batch ratio, e.g. 1:0 (gold only) or 1:1.
    #[arg(long, value_name = "G:N")]
    pub interleave: Option<String>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct DecodeFlags {
    /// 1 decodes greedily.
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub length_alpha: Option<f64>,
}

#[derive(Args)]
pub struct TokenizerArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Intent to translate; repeatable.
    #[arg(long, conflicts_with = "input")]
    pub intent: Vec<String>,
    /// File with one intent per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Write snippets here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2379)]
    pub gold_size: usize,
    #[arg(long, default_value_t = 20_000)]
    pub noisy_size: usize,
}

/// 1 usage/config, 2 data, 3 numerical fault.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::NonFinite { .. } => return 3,
                TrainError::Config(_) => return 1,
                TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => return 3,
                TrainError::Model(ModelError::Config(_)) => return 1,
                _ => {}
            }
        }
        if let Some(ModelError::Tensor(TensorError::NonFinite { .. })) = cause.downcast_ref::<ModelError>() {
            return 3;
        }
        if let Some(ModelError::Config(_)) = cause.downcast_ref::<ModelError>() {
            return 1;
        }
        if let Some(TensorError::NonFinite { .. }) = cause.downcast_ref::<TensorError>() {
            return 3;
        }
        if let Some(CorpusError::Parameter(_)) = cause.downcast_ref::<CorpusError>() {
            return 1;
        }
        if let Some(TokenizerError::VocabTooSmall(_) | TokenizerError::ZeroMaxLen) = cause.downcast_ref::<TokenizerError>() {
            return 1;
        }
    }
    let data = err.chain().any(|c| {
        c.is::<CorpusError>() || c.is::<TokenizerError>() || c.is::<CheckpointError>() || c.is::<std::io::Error>() || c.is::<TrainError>()
    });
    if data {
        2
    } else {
        1
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
    let result = match cli.command {
        Command::Data(DataCommand::Validate(args)) => commands::data_validate(&args),
        Command::Tokenizer(TokenizerCommand::Train(args)) => commands::tokenizer_train(&args),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Generate(args) => commands::generate(&args),
        Command::Cv(args) => commands::cv(&args),
        Command::Synth(args) => commands::synth(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
