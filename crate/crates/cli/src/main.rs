//! `ota`: data reformulation, attribute decomposition, supervision
//! building, gradient checks, toy training and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status: 1 for a failed check, 2 for unusable input.
#[derive(Debug)]
pub enum Fail {
    Check(String),
    Input(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail::Input(e.into())
    }
}

pub type CmdResult = Result<(), Fail>;

#[derive(Parser, Debug)]
#[command(name = "ota", version, about = "Attribute-level query alignment pipeline")]
pub struct Cli {
    /// TOML config; flags override it and OTA_* variables override both.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reject unknown config keys and malformed input lines.
    #[arg(long, global = true)]
    strict: bool,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Group grounding triplets into image-level samples.
    Aggregate(AggregateArgs),
    /// Attach LLM-extracted attributes to expression queries.
    Decompose(DecomposeArgs),
    /// Check stored attributes against their query text.
    ValidateAttrs(ValidateAttrsArgs),
    /// Draw text batches and correspondence matrices per sample.
    BuildSupervision(BuildSupervisionArgs),
    /// Finite-difference check of the head and loss gradients.
    Gradcheck(GradcheckArgs),
    /// Train on a synthetic world and report what was recovered.
    TrainToy(TrainToyArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Render a saved metric report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct AggregateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// One sample per triplet instead of merging per image.
    #[arg(long)]
    pub naive: bool,
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Use the offline rule-based decomposer.
    #[arg(long, conflicts_with = "endpoint")]
    pub mock: bool,
    /// Chat-completions URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub a_max: Option<usize>,
    /// JSONL of captions whose every attempt failed.
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    /// JSONL of every request and reply.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    /// Reuse attributes already present in the output file.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct ValidateAttrsArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// JSONL of per-query reports; defaults to rejected queries on stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub a_max: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Ovad,
    Rsvg,
}

#[derive(Args, Debug)]
pub struct BuildSupervisionArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Task,
    /// One category per line; defaults to every category in the input.
    #[arg(long)]
    pub vocabulary: Option<PathBuf>,
    #[arg(long)]
    pub q_max: Option<usize>,
    #[arg(long)]
    pub a_max: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_shuffle: bool,
    /// Directory for the 8-bit matrix exports.
    #[arg(long)]
    pub matrices_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = ota_core::gradcheck::DEFAULT_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = ota_core::gradcheck::DEFAULT_EPS)]
    pub eps: f64,
    /// Negate the analytic bias gradient to exercise the failure path.
    #[arg(long)]
    pub inject_fault: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub world_seed: Option<u64>,
    /// Weight of the attribute alignment loss.
    #[arg(long)]
    pub lambda_attr: Option<f64>,
    #[arg(long)]
    pub shared_affine: bool,
    /// History CSV path.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Recovery report JSON path; printed to stdout otherwise.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Head checkpoint path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Table,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictions JSONL, one image per line.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground-truth samples JSONL.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = ota_core::metrics::DEFAULT_TAUS)]
    pub taus: Vec<f64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Per-expression verdicts CSV.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = config::load(cli.config.as_deref(), cli.strict)?;
    if let Some(l) = &cli.log_level {
        cfg.log_level = Some(l.clone());
    }
    cfg.apply_env(|k| std::env::var(k).ok().filter(|v| !v.is_empty()));
    let level = cfg.log_level.clone().unwrap_or_else(|| "warn".into());
    let _ = env_logger::Builder::new().parse_filters(&level).format_timestamp(None).try_init();
    log::debug!("resolved config: {cfg:?}");

    let ctx = commands::Ctx { cfg, strict: cli.strict };
    match cli.command {
        Command::Aggregate(a) => commands::aggregate(&ctx, a),
        Command::Decompose(a) => commands::decompose(&ctx, a),
        Command::ValidateAttrs(a) => commands::validate_attrs(&ctx, a),
        Command::BuildSupervision(a) => commands::build_supervision(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::TrainToy(a) => commands::train_toy(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Fail::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
