//! Command-line driver: synthetic data, shape-model fitting, heatmap moments,
//! contour sampling, metric propagation and calibration evaluation.

pub mod commands;
pub mod output;
pub mod pipeline;

use std::path::PathBuf;

use anyhow::{Context, Result};
use casus_core::metrics::{AxisRule, VolumeOptions};
use casus_core::shape_model::DEFAULT_EPSILON2;
use casus_core::{Frame, MetricKind, ModelKind, View};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "casus", version, about = "Contour uncertainty propagation for LV clinical metrics")]
pub struct Cli {
    /// Worker threads (default: available cores; CASUS_THREADS takes precedence).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate a synthetic population, evaluation cases and predictions.
    Synth(SynthArgs),
    /// Fit a PCA shape model to a contour file.
    FitShapeModel(FitArgs),
    /// Convert a CHM1 heatmap tensor into a prediction record.
    Moments(MomentsArgs),
    /// Draw contour samples from predictions.
    Sample(SampleArgs),
    /// Propagate contour uncertainty through a clinical metric.
    Propagate(PropagateArgs),
    /// Score a propagation report against ground truth.
    Evaluate(EvaluateArgs),
    /// Run synth, fit, propagate and evaluate in one go.
    EndToEnd(EndToEndArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Single,
    Joint,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Single => ModelKind::Single,
            KindArg::Joint => ModelKind::Joint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Area,
    Fac,
    Volume,
    Ef,
}

impl From<MetricArg> for MetricKind {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Area => MetricKind::Area,
            MetricArg::Fac => MetricKind::Fac,
            MetricArg::Volume => MetricKind::Volume,
            MetricArg::Ef => MetricKind::Ef,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ViewArg {
    #[value(name = "A2C")]
    A2C,
    #[value(name = "A4C")]
    A4C,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::A2C => View::A2C,
            ViewArg::A4C => View::A4C,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum FrameArg {
    #[value(name = "ED")]
    ED,
    #[value(name = "ES")]
    ES,
}

impl From<FrameArg> for Frame {
    fn from(f: FrameArg) -> Self {
        match f {
            FrameArg::ED => Frame::ED,
            FrameArg::ES => Frame::ES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisArg {
    Max,
    Mean,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VolumeArgs {
    /// Disks in the biplane volume.
    #[arg(long, default_value_t = 20)]
    pub n_disks: usize,
    /// Long-axis length used for the disk height.
    #[arg(long, value_enum, default_value_t = AxisArg::Max)]
    pub long_axis: AxisArg,
}

impl VolumeArgs {
    pub fn options(&self) -> VolumeOptions {
        VolumeOptions {
            n_disks: self.n_disks,
            axis: match self.long_axis {
                AxisArg::Max => AxisRule::Max,
                AxisArg::Mean => AxisRule::Mean,
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub contours: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Single)]
    pub kind: KindArg,
    /// Use only contours of this view.
    #[arg(long, value_enum)]
    pub view: Option<ViewArg>,
    /// Use only contours of this frame (single models only).
    #[arg(long, value_enum)]
    pub frame: Option<FrameArg>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MomentsArgs {
    #[arg(long)]
    pub heatmaps: PathBuf,
    /// Record id (default: file stem).
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long, value_enum, default_value_t = ViewArg::A4C)]
    pub view: ViewArg,
    #[arg(long, value_enum, default_value_t = FrameArg::ED)]
    pub frame: FrameArg,
    /// Millimetres per normalized unit as `sy,sx`.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0])]
    pub spacing_mm: Vec<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub shape_model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON2)]
    pub epsilon2: f64,
    #[arg(long, default_value_t = 25)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw ED/ES pairs jointly.
    #[arg(long, requires = "joint_model")]
    pub temporal: bool,
    #[arg(long)]
    pub joint_model: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PropagateArgs {
    /// One prediction file per epistemic draw.
    #[arg(long, value_delimiter = ',', required = true)]
    pub predictions: Vec<PathBuf>,
    #[arg(long)]
    pub shape_model: PathBuf,
    #[arg(long)]
    pub joint_model: Option<PathBuf>,
    /// Sample ED/ES jointly for FAC and EF.
    #[arg(long, requires = "joint_model")]
    pub temporal: bool,
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    #[arg(long, default_value_t = 25)]
    pub t_aleatoric: usize,
    /// Prediction files to use (default: all given).
    #[arg(long)]
    pub t_epistemic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON2)]
    pub epsilon2: f64,
    #[command(flatten)]
    pub volume: VolumeArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// `report.jsonl` written by `propagate`.
    #[arg(long)]
    pub report_in: PathBuf,
    /// Ground-truth contours.
    #[arg(long)]
    pub ground_truth: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Compare errors against the variance instead of the standard deviation.
    #[arg(long)]
    pub uce_use_variance: bool,
    #[command(flatten)]
    pub volume: VolumeArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EndToEndArgs {
    /// Synthetic data config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and seeds every stage.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 25)]
    pub t_aleatoric: usize,
    /// Epistemic prediction sets (at most the config's `n_epistemic`).
    #[arg(long)]
    pub t_epistemic: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EPSILON2)]
    pub epsilon2: f64,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Grid size for the segmentation statistics (0 disables them).
    #[arg(long, default_value_t = 64)]
    pub seg_grid: usize,
    #[arg(long)]
    pub uce_use_variance: bool,
    #[command(flatten)]
    pub volume: VolumeArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Thread count: `CASUS_THREADS` when set, else `--threads`.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("CASUS_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v.trim().parse().with_context(|| format!("CASUS_THREADS={v:?} is not a count"))?;
            Ok(Some(n))
        }
        _ => Ok(flag),
    }
}

/// Runs the parsed command on a pool of the requested size.
pub fn run(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.threads)? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("building thread pool")?;
    pool.install(|| commands::dispatch(&cli))
}
