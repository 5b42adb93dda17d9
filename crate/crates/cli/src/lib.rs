//! `fa-ood` command-line interface.
//!
//! Every subcommand is also exposed as a `cmd_*` function so runs can be
//! driven from tests without spawning a process.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fa_ood_core::train::LossKind;
use fa_ood_core::{ErrorKind, InitMode, ScoreKind};

mod commands;
mod plot;

pub use commands::{
    cmd_ablate, cmd_cache, cmd_eval, cmd_score, cmd_sweep_k, cmd_train, parse_k_list, run_id,
    EvalOutcome, SweepOutcome, TrainOutcome, BANK_FILE, REPORT_CSV, RUN_MANIFEST, TRAIN_LOG_CSV,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fa-ood",
    version,
    about = "Few-shot OOD detection with forced prompt learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the forced prompt on a benchmark's few-shot split.
    Train(TrainArgs),
    /// Evaluate a trained bank: FPR95, AUROC and ID accuracy per OOD set.
    Eval(EvalArgs),
    /// Write per-sample OOD scores for every evaluated image.
    Score(EvalArgs),
    /// Train and evaluate once per value of K.
    SweepK(SweepArgs),
    /// Run one ablation suite.
    Ablate(AblateArgs),
    /// Encode raw f32 inputs listed in a manifest into an embedding cache.
    Cache(CacheArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    /// Deterministic toy encoder (no weights needed).
    Toy,
    /// Precomputed embedding caches.
    Cache,
    /// Real vision-language checkpoint.
    ClipAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreArg {
    Mcm,
    Glmcm,
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Mcm => ScoreKind::Mcm,
            ScoreArg::Glmcm => ScoreKind::GlMcm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Manual,
    Random,
}

impl From<InitArg> for InitMode {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Manual => InitMode::Manual,
            InitArg::Random => InitMode::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    FceK,
    Ce,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::FceK => LossKind::FceK,
            LossArg::Ce => LossKind::CrossEntropy,
        }
    }
}

/// Benchmark selection and output location.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Registered benchmark name.
    #[arg(long, default_value = "toy")]
    pub benchmark: String,
    /// Registry JSON replacing the bundled one.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Root for registry-relative paths (defaults to $FA_OOD_DATA_ROOT, then `.`).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    pub backend: Backend,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Also write SVG plots.
    #[arg(long)]
    pub plots: bool,
}

/// Training hyper-parameters.
#[derive(Debug, Clone, Args)]
pub struct TrainParams {
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Forced coefficient K.
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    pub k: f64,
    /// Training temperature.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub tau: f64,
    /// Defaults to 30/50 epochs for 1000-class ID sets, 200 otherwise.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 2e-3, allow_negative_numbers = true)]
    pub lr: f64,
    #[arg(long, default_value_t = 160)]
    pub batch_size: usize,
    /// Forced-prompt initialisation.
    #[arg(long, value_enum, default_value = "manual")]
    pub init: InitArg,
    /// Original-prompt initialisation.
    #[arg(long, value_enum, default_value = "manual")]
    pub original_init: InitArg,
    /// One forced context per class instead of a shared one.
    #[arg(long)]
    pub per_class: bool,
    #[arg(long, value_enum, default_value = "fce-k")]
    pub loss: LossArg,
}

/// Inference settings.
#[derive(Debug, Clone, Args)]
pub struct ScoreParams {
    #[arg(long, value_enum, default_value = "glmcm")]
    pub score: ScoreArg,
    /// Inference temperature.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub tau0: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainParams,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub scoring: ScoreParams,
    /// Bank file (defaults to `<out>/bank.fabank`).
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainParams,
    #[command(flatten)]
    pub scoring: ScoreParams,
    /// K values: a range `a..b` (inclusive) or a comma list.
    #[arg(long, default_value = "0..6")]
    pub k_list: String,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainParams,
    #[command(flatten)]
    pub scoring: ScoreParams,
    /// fce_vs_ce, init_modes, shared_vector or k_sweep.
    #[arg(long)]
    pub suite: String,
    #[arg(long, default_value = "0..6")]
    pub k_list: String,
}

#[derive(Debug, Clone, Args)]
pub struct CacheArgs {
    /// Manifest whose entries carry input `path`s.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Cache file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    pub backend: Backend,
    #[arg(long, default_value_t = 512)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub num_locals: usize,
    /// Toy encoder seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> fa_ood_core::Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args).map(|o| {
            println!(
                "run {} trained; bank written to {}",
                o.run_id,
                o.bank_path.display()
            );
            println!("similarity gap {:.6}", o.log.similarity_gap);
        }),
        Command::Eval(args) => cmd_eval(&args).map(|o| print!("{}", o.report.to_csv())),
        Command::Score(args) => {
            cmd_score(&args).map(|p| println!("scores written to {}", p.display()))
        }
        Command::SweepK(args) => cmd_sweep_k(&args).map(|o| print!("{}", o.table.to_csv())),
        Command::Ablate(args) => cmd_ablate(&args).map(|t| print!("{}", t.to_csv())),
        Command::Cache(args) => cmd_cache(&args).map(|n| println!("cached {n} rows")),
    }
}
