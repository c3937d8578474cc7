//! `cbd`: chain construction, surgery, training and evaluation from the
//! command line.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use cbd::surgery::ReplicationMode;
use cbd::tensor::DType;
use cbd::tokenizer::TokenizerKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "cbd",
    version,
    about = "Chain-based distillation for small decoder-only transformers"
)]
pub struct Cli {
    /// Overrides every seed in configs and flags.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; falls back to the config's out_dir, then CBD_OUT_DIR.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build an anchor chain from a chain config file.
    Chain {
        /// Path to a chain config, or the JSON itself.
        config: String,
    },
    /// Interpolate a target between two adjacent anchors.
    Interpolate(InterpolateArgs),
    /// Grow a checkpoint to a larger nested config.
    Expand(SurgeryArgs),
    /// Shrink a checkpoint to a smaller nested config.
    Subset(SurgeryArgs),
    /// Validation loss and perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Train a CBD initialization and a random one side by side.
    CompareInit(CompareInitArgs),
    /// Step-0 loss of interpolated targets over a list of α values.
    SweepAlpha(SweepArgs),
    /// Train a model from random initialization with cross-entropy.
    Train(TrainArgs),
    /// Distill a teacher checkpoint into a smaller student.
    Distill(DistillArgs),
    /// Print a checkpoint's config, parameter count and lineage.
    Inspect { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Copy,
    Identity,
}

impl From<Mode> for ReplicationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Copy => ReplicationMode::Copy,
            Mode::Identity => ReplicationMode::Identity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Tokenizer {
    Byte,
    Char,
}

impl From<Tokenizer> for TokenizerKind {
    fn from(t: Tokenizer) -> Self {
        match t {
            Tokenizer::Byte => TokenizerKind::Byte,
            Tokenizer::Char => TokenizerKind::Char,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub small: PathBuf,
    #[arg(long)]
    pub large: PathBuf,
    /// Target ModelConfig as a path or inline JSON.
    #[arg(long)]
    pub target_config: String,
    /// A value in [0, 1], or "auto" for the parameter-count rule.
    #[arg(long, default_value = "auto", allow_hyphen_values = true)]
    pub alpha: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SurgeryArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Target ModelConfig as a path or inline JSON.
    #[arg(long, required_unless_present = "plan")]
    pub target_config: Option<String>,
    /// Explicit transform plan (path or inline JSON), e.g. a printed inverse.
    #[arg(long, conflicts_with = "target_config")]
    pub plan: Option<String>,
    #[arg(long, value_enum, default_value = "copy")]
    pub mode: Mode,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the inverse plan of an expansion to this file.
    #[arg(long)]
    pub inverse_plan: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CorpusArg {
    /// Corpus spec as a path or inline JSON: {kind, seed, params | path}.
    #[arg(long)]
    pub corpus: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long, value_enum, default_value = "validation")]
    pub split: SplitArg,
    /// Window length; defaults to the model's max_seq_len.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Report file stem inside the output directory.
    #[arg(long, default_value = "eval")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct CompareInitArgs {
    /// A ready CBD initialization.
    #[arg(long, conflicts_with_all = ["anchors", "target_config"])]
    pub init: Option<PathBuf>,
    /// Comma-separated anchor checkpoints, largest first.
    #[arg(long, value_delimiter = ',', requires = "target_config")]
    pub anchors: Vec<PathBuf>,
    #[arg(long)]
    pub target_config: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub rand_seed: u64,
    /// DistillConfig (path or inline JSON) used for both runs.
    #[arg(long)]
    pub train: String,
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
    #[arg(long, default_value = "compare-init")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub small: PathBuf,
    #[arg(long)]
    pub large: PathBuf,
    #[arg(long)]
    pub target_config: String,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    )]
    pub alphas: Vec<f64>,
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value = "sweep-alpha")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// ModelConfig as a path or inline JSON.
    #[arg(long)]
    pub config: String,
    #[arg(long, value_enum)]
    pub tokenizer: Tokenizer,
    /// DistillConfig (path or inline JSON); loss_kind is ignored.
    #[arg(long)]
    pub train: String,
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[arg(long, default_value = "model")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student ModelConfig as a path or inline JSON.
    #[arg(long)]
    pub student_config: String,
    /// DistillConfig as a path or inline JSON.
    #[arg(long)]
    pub train: String,
    #[command(flatten)]
    pub corpus: CorpusArg,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
