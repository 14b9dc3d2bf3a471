//! Command-line arguments. Every command's argument struct doubles as its
//! run recipe: it serializes to TOML with a `command` tag and can be fed back
//! through `crumbs run`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use crumbs::fixture_lab::{FamilySpec, Split};
use crumbs::{EvalScope, MaskScope, MaskVariant, MergeMethod, SubsetTuning};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "crumbs", version, about = "Merge fine-tuned models through sparse task vectors")]
pub struct Cli {
    /// Print structured JSON instead of human tables.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Subtract a base checkpoint from a fine-tuned one.
    Diff(DiffArgs),
    /// Merge task vectors onto a base model.
    Merge(MergeArgs),
    /// Build a magnitude mask for one task vector.
    Mask(MaskArgs),
    /// Pairwise cosine similarity of task vectors.
    Cosine(CosineArgs),
    /// Grid search over merge hyperparameters on a fixture family.
    Sweep(SweepArgs),
    /// Merge every non-empty subset of a fixture family's tasks.
    Subsets(SubsetsArgs),
    /// Train a synthetic base model and its fine-tuned family.
    Fixtures(FixturesArgs),
    /// Show the tensors and metadata of a checkpoint file.
    Inspect(InspectArgs),
    /// Convert a safetensors file (float32 only) to the native format.
    Import(ConvertArgs),
    /// Convert a native checkpoint to safetensors.
    Export(ConvertArgs),
    /// Re-run a recipe file written by an earlier run.
    #[serde(skip)]
    Run(RunArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DiffArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub finetuned: PathBuf,
    /// Defaults to the fine-tuned file's stem.
    #[arg(long)]
    pub task_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Masking flags shared by several commands.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MaskFlags {
    /// Fraction of smallest-magnitude entries dropped per tensor.
    #[arg(long, default_value_t = 0.9)]
    pub beta: f64,
    /// Rank quantile above which the largest entries are dropped.
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    /// two_tailed, bottom_only, top_only, none or random.
    #[arg(long)]
    pub variant: Option<MaskVariant>,
    /// per_layer or global.
    #[arg(long, default_value_t = MaskScope::PerLayer)]
    pub scope: MaskScope,
    /// Tensor-name prefixes left unmasked.
    #[arg(long, num_args = 1..)]
    #[serde(default)]
    pub exempt: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MergeArgs {
    #[arg(long, default_value_t = MergeMethod::Breadcrumbs)]
    pub method: MergeMethod,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub vectors: Vec<PathBuf>,
    #[arg(long)]
    pub alpha: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub mask: MaskFlags,
    /// TIES: fraction of each task vector kept by the trim step.
    #[arg(long, default_value_t = 0.2)]
    pub keep_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Merge onto a base other than the one the vectors were diffed from.
    #[arg(long)]
    #[serde(default)]
    pub allow_base_mismatch: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MaskArgs {
    #[arg(long)]
    pub vector: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub mask: MaskFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CosineArgs {
    #[arg(long, num_args = 2.., required = true)]
    pub vectors: Vec<PathBuf>,
    /// Mask each vector before comparing.
    #[arg(long)]
    #[serde(default)]
    pub masked: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub mask: MaskFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the matrix as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Grid axes; omitted axes use the method's default neighborhood.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GridFlags {
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub keep_fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub variant: Option<MaskVariant>,
    #[arg(long, default_value_t = MaskScope::PerLayer)]
    pub scope: MaskScope,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Directory written by `crumbs fixtures`.
    #[arg(long)]
    pub family: PathBuf,
    #[arg(long, default_value_t = MergeMethod::Breadcrumbs)]
    pub method: MergeMethod,
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridFlags,
    /// Split used for tuning; the winner is also scored on the other
    /// held-out split.
    #[arg(long, default_value_t = Split::Val)]
    pub split: Split,
    /// Validation-free run: tune on the first k tasks, then extend.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SubsetsArgs {
    #[arg(long)]
    pub family: PathBuf,
    #[arg(long, default_value_t = MergeMethod::Breadcrumbs)]
    pub method: MergeMethod,
    /// Fixed merge strength; required unless `--tune` is given.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub mask: MaskFlags,
    #[arg(long, default_value_t = 0.2)]
    pub keep_fraction: f64,
    /// Tune hyperparameters over the default grid per subset or per size.
    #[arg(long, value_parser = parse_tuning)]
    pub tune: Option<SubsetTuning>,
    /// Score each merge on all tasks or only the merged ones.
    #[arg(long, value_parser = parse_eval_scope, default_value = "observed")]
    pub eval_scope: EvalScope,
    #[arg(long, default_value_t = Split::Val)]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FixturesArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub tasks: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Full family specification; only settable from a recipe.
    #[arg(skip)]
    pub family: Option<FamilySpec>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InspectArgs {
    pub file: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ConvertArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    pub recipe: PathBuf,
}

fn parse_tuning(s: &str) -> Result<SubsetTuning, String> {
    match s {
        "per_subset" | "per-subset" => Ok(SubsetTuning::PerSubset),
        "per_size" | "per-size" => Ok(SubsetTuning::PerSize),
        other => Err(format!("expected per_subset or per_size, got `{other}`")),
    }
}

fn parse_eval_scope(s: &str) -> Result<EvalScope, String> {
    match s {
        "all" | "all_tasks" => Ok(EvalScope::AllTasks),
        "observed" | "observed_only" => Ok(EvalScope::ObservedOnly),
        other => Err(format!("expected all or observed, got `{other}`")),
    }
}
