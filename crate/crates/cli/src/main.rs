//! `cpt`: data generation, encoding, prompt training and evaluation.

mod data;
mod files;
mod grad;
mod manifest;
mod score;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "cpt",
    version,
    about = "Consistent prompt tuning for multi-modal zero-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic caption corpus or labeled test items.
    Gen(GenArgs),
    /// Embed captions, test items or class prompts with the synthetic encoder.
    Encode(EncodeArgs),
    /// Train prompt pools, optionally resuming or extending a checkpoint.
    Train(TrainArgs),
    /// Score labeled items with trained prompts or class prompts.
    Eval(EvalArgs),
    /// Add labels or modalities to a checkpoint.
    Extend(ExtendArgs),
    /// Sum softmax predictions from an external classifier and the prompts.
    Fuse(FuseArgs),
    /// Finite-difference check of the loss gradients on random instances.
    CheckGrad(CheckGradArgs),
    /// Write cosine similarities between prompt pools or items and prompts.
    DumpSims(DumpSimsArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Label manifest (JSON).
    #[arg(long)]
    pub labels: PathBuf,
    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
    /// Captions for a modality, `name=count`; repeatable.
    #[arg(long = "per-modality", value_name = "NAME=COUNT")]
    pub per_modality: Vec<String>,
    /// Largest label subset per caption, `name=k`; repeatable.
    #[arg(long = "k-max", value_name = "NAME=K")]
    pub k_max: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Emit single-label test items, this many per class, instead of captions.
    #[arg(long, value_name = "N")]
    pub items_per_class: Option<usize>,
    /// Modalities to emit test items for (default: all).
    #[arg(long = "modality")]
    pub modalities: Vec<String>,
    /// First item id in test-item mode.
    #[arg(long, default_value_t = 0)]
    pub id_base: u64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum EncodeSource {
    Caption,
    Test,
    ClassPrompts,
}

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub labels: PathBuf,
    /// Caption or item JSONL (not used for class prompts).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output CPTE file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "caption")]
    pub source: EncodeSource,
    /// Target modality for class prompts.
    #[arg(long)]
    pub modality: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub anchor_seed: Option<u64>,
    #[arg(long)]
    pub delta_sigma: Option<f64>,
    /// Caption noise std, `name=sigma`; repeatable.
    #[arg(long = "noise", value_name = "NAME=SIGMA")]
    pub noise: Vec<String>,
    /// Test-item noise std, `name=sigma`; repeatable.
    #[arg(long = "test-noise", value_name = "NAME=SIGMA")]
    pub test_noise: Vec<String>,
    /// Existing CPTE file whose dimension the output must match.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DirectionArg {
    Uni,
    Bi,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Cosine,
    Dot,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub labels: PathBuf,
    /// Caption JSONL.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Caption embeddings (CPTE).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Validation items (JSONL) for metrics and adaptive weak selection.
    #[arg(long, requires = "val_embeddings")]
    pub val_items: Option<PathBuf>,
    #[arg(long, requires = "val_items")]
    pub val_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// With --resume and an extended label manifest: freeze the old rows.
    #[arg(long, requires = "resume")]
    pub freeze_old: bool,
    /// Initialize pools from class-prompt embeddings, `modality=path.cpte`.
    #[arg(long = "init-prompts", value_name = "NAME=PATH")]
    pub init_prompts: Vec<String>,
    /// Train only these modalities; repeatable.
    #[arg(long = "only", value_name = "NAME")]
    pub only: Vec<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// `adaptive` or `fixed:<modality>`.
    #[arg(long)]
    pub weak: Option<String>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint directory with trained pools.
    #[arg(long, conflicts_with = "class_prompts", required_unless_present = "class_prompts")]
    pub checkpoint: Option<PathBuf>,
    /// Class-prompt embeddings (CPTE) for the zero-shot baseline.
    #[arg(long, requires = "labels")]
    pub class_prompts: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Item JSONL.
    #[arg(long)]
    pub items: PathBuf,
    /// Item embeddings (CPTE).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Modalities to evaluate; repeatable (default: every modality with items).
    #[arg(long = "modality")]
    pub modalities: Vec<String>,
    /// Score over the whole label space instead of the item's block.
    #[arg(long)]
    pub unrestricted: bool,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-item predictions (JSONL, scores over the scored range).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Write softmax scores at this temperature instead of similarities.
    #[arg(long)]
    pub softmax_tau: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ContinualArg {
    Continue,
    FreezeOld,
}

#[derive(Args)]
pub struct ExtendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// New labels for an existing modality, `modality=a,b`; repeatable.
    #[arg(long = "add-labels", value_name = "NAME=LABELS")]
    pub add_labels: Vec<String>,
    /// A new modality with its labels, `name=a,b`; repeatable.
    #[arg(long = "add-modality", value_name = "NAME=LABELS")]
    pub add_modality: Vec<String>,
    #[arg(long, value_enum, default_value = "continue")]
    pub mode: ContinualArg,
}

#[derive(Args)]
pub struct FuseArgs {
    /// Supervised-model softmax predictions (JSONL).
    #[arg(long)]
    pub supervised: PathBuf,
    /// Prompt-classifier softmax predictions (JSONL).
    #[arg(long)]
    pub tuned: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// With --items and --modality: print a report on the fused scores.
    #[arg(long, requires_all = ["items", "modality"])]
    pub labels: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub items: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub modality: Option<String>,
}

#[derive(Args)]
pub struct CheckGradArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: u64,
    /// First instance seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Per-check reports (JSONL).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DumpSimsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Two pool modalities, `a,b`: similarities between their prompt rows.
    #[arg(long, conflicts_with = "items", required_unless_present = "items")]
    pub pools: Option<String>,
    /// Item JSONL: similarities between items and their modality's prompts.
    #[arg(long, requires_all = ["embeddings", "modality"])]
    pub items: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub modality: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprint!("cpt-error: {}", text.strip_prefix("error: ").unwrap_or(&text));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => data::gen(a),
        Command::Encode(a) => data::encode(a),
        Command::Train(a) => train::train(a),
        Command::Extend(a) => train::extend(a),
        Command::Eval(a) => score::eval(a),
        Command::Fuse(a) => score::fuse(a),
        Command::DumpSims(a) => score::dump_sims(a),
        Command::CheckGrad(a) => grad::check_grad(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cpt-error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
