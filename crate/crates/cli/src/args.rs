//! Command-line grammar.

use std::path::PathBuf;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use dlanet::autodiff::DType;
use dlanet::dataset::SplitMode;
use dlanet::dla::{PePlacement, PeVariant, PoolMode, SaAggregate, Switch};

/// Parser restricted to the fixed names of a named enum, so `--help` lists
/// them and a wrong value is rejected with the allowed set.
macro_rules! choice {
    ($ty:ty) => {
        PossibleValuesParser::new(<$ty>::ALL.iter().map(|v| v.name())).try_map(|s| s.parse::<$ty>())
    };
}

#[derive(Debug, Parser)]
#[command(name = "dlanet", version, about = "Dual local attention network for facade point-cloud segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate labelled synthetic facade areas as Area<i>/Area<i>.fpc.
    Gen(GenArgs),
    /// Train on an area directory under a split; kfold6 pools its folds.
    Train(TrainArgs),
    /// Score a checkpoint on one or more labelled areas.
    Eval(EvalArgs),
    /// Label a cloud with a checkpoint and write a PLY coloured by class.
    Predict(PredictArgs),
    /// Per-area class counts of an area directory.
    Stats(StatsArgs),
    /// Gradient, KNN, metric and invariance checks; exit 4 on failure.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points per area.
    #[arg(long, default_value_t = 8192)]
    pub points: usize,
    #[arg(long, default_value_t = 6)]
    pub areas: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with optional "net" and "train" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Re-run exactly what a previous run's manifest.json describes.
    #[arg(long, conflicts_with_all = ["config", "data", "split"])]
    pub manifest: Option<PathBuf>,
    /// Directory holding Area<i> subdirectories.
    #[arg(long, required_unless_present = "manifest")]
    pub data: Option<PathBuf>,
    /// leave_one_out:<Area> or kfold6.
    #[arg(long, value_parser = |s: &str| s.parse::<SplitMode>())]
    pub split: Option<SplitMode>,
    /// Run directory: manifest, pooled metrics and one fold<i>/ per fold.
    #[arg(long)]
    pub out: PathBuf,
    /// Run folds on separate threads, each with its own derived seed.
    #[arg(long)]
    pub parallel_folds: bool,
    #[command(flatten)]
    pub net: NetOverrides,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Default, Args)]
pub struct NetOverrides {
    /// Position-encoding inputs.
    #[arg(long, value_parser = choice!(PeVariant))]
    pub pe_variant: Option<PeVariant>,
    /// Batch norm + ReLU after the position encoding.
    #[arg(long, value_parser = choice!(Switch))]
    pub pe_bn: Option<Switch>,
    /// Where self-attention adds the position encoding.
    #[arg(long = "sa-pe", value_parser = choice!(PePlacement))]
    pub sa_pe: Option<PePlacement>,
    /// Batch norm + ReLU after self-attention.
    #[arg(long, value_parser = choice!(Switch))]
    pub sa_bn: Option<Switch>,
    /// Sum self-attention over neighbours or keep one row per neighbour.
    #[arg(long, value_parser = choice!(SaAggregate))]
    pub sa_aggregate: Option<SaAggregate>,
    /// Neighbourhood pooling.
    #[arg(long, value_parser = choice!(PoolMode))]
    pub ap_mode: Option<PoolMode>,
    /// Use xyz only.
    #[arg(long)]
    pub no_rgb: bool,
    /// Neighbours per point (K).
    #[arg(long)]
    pub k_neighbors: Option<usize>,
    /// Dropout probability before the classifier.
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Optimiser steps per epoch.
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Crops per optimiser step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Per-epoch learning-rate factor.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Points per training crop.
    #[arg(long)]
    pub points_per_sample: Option<usize>,
    /// Largest cloud evaluated in one pass.
    #[arg(long)]
    pub eval_chunk: Option<usize>,
    /// Forward passes re-estimating batch-norm statistics after training.
    #[arg(long)]
    pub bn_refresh_passes: Option<usize>,
    /// Overridden in turn by DLA_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parameter and activation precision.
    #[arg(long, value_parser = PossibleValuesParser::new(["f32", "f64"]).map(|s| if s == "f64" { DType::F64 } else { DType::F32 }))]
    pub precision: Option<DType>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// model.json written by train; defaults to the checkpoint's directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Area to score; repeat to pool several.
    #[arg(long, required = true)]
    pub area: Vec<String>,
    /// Metrics JSON destination; defaults to eval_<area>.json beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Cloud in .fpc (text or binary) or .ply.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// PLY output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Perturb one analytic gradient so the checker must fail.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}
