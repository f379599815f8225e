//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use casus_core::calibration::{reliability_csv, reliability_table};
use casus_core::heatmap::{extract_stack, normalize_heatmap};
use casus_core::io::{self, decode_chm1, ContourRecord, PredictionRecord, SampleRecord, ShapeModelFile};
use casus_core::metrics::VolumeOptions;
use casus_core::sampler::{self, frame_path};
use casus_core::shape_model::{fit_pca, recenter_from_model, ModelKind, ShapeModel};
use casus_core::synth::{Generator, LabeledPrediction, SynthConfig};
use casus_core::{Contour, Frame, MetricKind, RandomStream, View};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::output::{write_atomic, write_json, write_jsonl, RunManifest};
use crate::pipeline::{
    self, contour_set, evaluate_report, prediction_set, segmentation_stats, view_path, MetricEvaluation, PredictionSet,
    PropagateRecord, PropagationSettings, SegmentationStats,
};
use crate::{Cli, Command, EndToEndArgs, EvaluateArgs, FitArgs, MomentsArgs, PropagateArgs, SampleArgs, SynthArgs};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let (name, args, seed, inputs, out_dir): (&str, serde_json::Value, Option<u64>, Vec<PathBuf>, &Path) =
        match &cli.command {
            Command::Synth(a) => {
                synth(a)?;
                ("synth", serde_json::to_value(a)?, a.seed, a.config.iter().cloned().collect(), &a.out_dir)
            }
            Command::FitShapeModel(a) => {
                fit(a)?;
                ("fit-shape-model", serde_json::to_value(a)?, None, vec![a.contours.clone()], &a.out_dir)
            }
            Command::Moments(a) => {
                moments(a)?;
                ("moments", serde_json::to_value(a)?, None, vec![a.heatmaps.clone()], &a.out_dir)
            }
            Command::Sample(a) => {
                sample(a)?;
                let mut inputs = vec![a.predictions.clone(), a.shape_model.clone()];
                inputs.extend(a.joint_model.iter().cloned());
                ("sample", serde_json::to_value(a)?, Some(a.seed), inputs, &a.out_dir)
            }
            Command::Propagate(a) => {
                propagate(a)?;
                let mut inputs = a.predictions.clone();
                inputs.push(a.shape_model.clone());
                inputs.extend(a.joint_model.iter().cloned());
                ("propagate", serde_json::to_value(a)?, Some(a.seed), inputs, &a.out_dir)
            }
            Command::Evaluate(a) => {
                evaluate(a)?;
                let inputs = vec![a.report_in.clone(), a.ground_truth.clone()];
                ("evaluate", serde_json::to_value(a)?, None, inputs, &a.out_dir)
            }
            Command::EndToEnd(a) => {
                let seed = end_to_end(a)?;
                ("end-to-end", serde_json::to_value(a)?, Some(seed), a.config.iter().cloned().collect(), &a.out_dir)
            }
        };
    RunManifest::new(name, args, seed, &inputs)?.finish(out_dir, start.elapsed())
}

fn stage_manifest(
    name: &str,
    args: serde_json::Value,
    seed: Option<u64>,
    inputs: &[PathBuf],
    dir: &Path,
    start: Instant,
) -> Result<()> {
    RunManifest::new(name, args, seed, inputs)?.finish(dir, start.elapsed())
}

pub fn load_synth_config(path: Option<&Path>, seed: Option<u64>) -> Result<SynthConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Paths written by [`write_synth`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub contours: PathBuf,
    pub truth: PathBuf,
    pub predictions: PathBuf,
    pub epistemic: Vec<PathBuf>,
}

fn prediction_records(preds: &[LabeledPrediction]) -> Vec<PredictionRecord> {
    preds.iter().map(|p| PredictionRecord::from_distribution(&p.id, &p.dist)).collect()
}

/// Writes the training population, ground truth and prediction files.
pub fn write_synth(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthFiles> {
    let g = Generator::new(cfg)?;
    let population = g.population();
    let cases = g.cases();
    let preds = g.predictions(&cases)?;
    let contour_records = |cases: &[casus_core::synth::SynthCase]| -> Vec<ContourRecord> {
        cases
            .iter()
            .flat_map(|c| [ContourRecord::from_contour(&c.id, &c.ed), ContourRecord::from_contour(&c.id, &c.es)])
            .collect()
    };
    let files = SynthFiles {
        contours: out_dir.join("contours.jsonl"),
        truth: out_dir.join("truth.jsonl"),
        predictions: out_dir.join("predictions.jsonl"),
        epistemic: (0..cfg.n_epistemic).map(|t| out_dir.join(format!("predictions_e{t}.jsonl"))).collect(),
    };
    write_jsonl(&files.contours, &contour_records(&population))?;
    write_jsonl(&files.truth, &contour_records(&cases))?;
    write_jsonl(&files.predictions, &prediction_records(&preds.base))?;
    for (path, set) in files.epistemic.iter().zip(&preds.epistemic) {
        write_jsonl(path, &prediction_records(set))?;
    }
    write_json(&out_dir.join("config.json"), cfg)?;
    Ok(files)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = load_synth_config(a.config.as_deref(), a.seed)?;
    let files = write_synth(&cfg, &a.out_dir)?;
    log::info!("wrote synthetic data to {}", files.contours.parent().unwrap_or(Path::new(".")).display());
    Ok(())
}

/// Fits a model to `(id, contour)` pairs. Joint models pair ED with ES per
/// (id, view) and list any unpaired ids in the error.
pub fn fit_model(contours: &[(String, Contour)], kind: ModelKind) -> Result<ShapeModel> {
    if contours.is_empty() {
        bail!("no contours to fit");
    }
    let k = contours[0].1.len();
    if let Some((id, c)) = contours.iter().find(|(_, c)| c.len() != k) {
        bail!("contour {id} has {} points, expected {k}", c.len());
    }
    let shapes: Vec<DVector<f64>> = match kind {
        ModelKind::Single => contours.iter().map(|(_, c)| DVector::from_vec(c.to_flat())).collect(),
        ModelKind::Joint => {
            let mut pairs: BTreeMap<(String, View), [Option<&Contour>; 2]> = BTreeMap::new();
            for (id, c) in contours {
                let slot = &mut pairs.entry((id.clone(), c.view)).or_default()[frame_path(c.frame) as usize];
                if slot.is_some() {
                    bail!("duplicate {:?} contour for {id}/{:?}", c.frame, c.view);
                }
                *slot = Some(c);
            }
            let unpaired: Vec<String> = pairs
                .iter()
                .filter(|(_, p)| p[0].is_none() || p[1].is_none())
                .map(|((id, v), _)| format!("{id}/{v:?}"))
                .collect();
            if !unpaired.is_empty() {
                bail!("joint model needs ED and ES for every id; unpaired: {}", unpaired.join(", "));
            }
            pairs
                .values()
                .map(|p| {
                    let mut v = p[0].expect("paired").to_flat();
                    v.extend(p[1].expect("paired").to_flat());
                    DVector::from_vec(v)
                })
                .collect()
        }
    };
    Ok(fit_pca(&shapes, kind)?)
}

fn fit(a: &FitArgs) -> Result<()> {
    let mut contours = io::read_contours(&a.contours)?;
    if let Some(v) = a.view {
        let v = View::from(v);
        contours.retain(|(_, c)| c.view == v);
    }
    if let Some(f) = a.frame {
        if a.kind == crate::KindArg::Joint {
            bail!("--frame cannot be combined with a joint model");
        }
        let f = Frame::from(f);
        contours.retain(|(_, c)| c.frame == f);
    }
    let model = fit_model(&contours, a.kind.into())?;
    log::info!("fitted {:?} model: dim {}, rank {}", model.kind, model.dim(), model.rank());
    write_json(&a.out_dir.join("shape_model.json"), &ShapeModelFile::from(&model))
}

fn moments(a: &MomentsArgs) -> Result<()> {
    if a.spacing_mm.len() != 2 || a.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        bail!("--spacing-mm needs two positive values `sy,sx`");
    }
    let bytes = std::fs::read(&a.heatmaps).with_context(|| format!("reading {}", a.heatmaps.display()))?;
    let stack = decode_chm1(&bytes).with_context(|| format!("decoding {}", a.heatmaps.display()))?;
    let gaussians = extract_stack(&normalize_heatmap(&stack)?)?;
    let id = match &a.id {
        Some(id) => id.clone(),
        None => a.heatmaps.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let k = gaussians.len();
    let record = PredictionRecord {
        id,
        view: a.view.into(),
        frame: a.frame.into(),
        points: gaussians.iter().map(|g| [g.mu.x, g.mu.y]).collect(),
        covariances: gaussians
            .iter()
            .map(|g| [[g.sigma[(0, 0)], g.sigma[(0, 1)]], [g.sigma[(1, 0)], g.sigma[(1, 1)]]])
            .collect(),
        spacing_mm: Some([a.spacing_mm[0], a.spacing_mm[1]]),
        landmarks: (k >= 5 && k % 2 == 1).then(|| casus_core::Landmarks::canonical(k).as_array()),
    };
    write_jsonl(&a.out_dir.join("predictions.jsonl"), &[record])
}

fn load_model(path: &Path) -> Result<ShapeModel> {
    io::read_shape_model(path).with_context(|| format!("reading shape model {}", path.display()))
}

fn load_predictions(path: &Path) -> Result<PredictionSet> {
    prediction_set(io::read_predictions(path)?).with_context(|| format!("indexing {}", path.display()))
}

/// Draws `n` samples per image (or per ED/ES pair when `joint` is given).
pub fn sample_records(
    set: &PredictionSet,
    single: &ShapeModel,
    joint: Option<&ShapeModel>,
    n: usize,
    epsilon2: f64,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    let root = RandomStream::new(seed);
    let per_case: Vec<Vec<SampleRecord>> = match joint {
        None => set
            .items
            .iter()
            .collect::<Vec<_>>()
            .into_par_iter()
            .enumerate()
            .map(|(i, ((id, view, frame), dist))| {
                let model = recenter_from_model(single, &DVector::from_vec(dist.mean_flat()))?;
                (0..n)
                    .map(|s| {
                        let stream =
                            root.child(i as u64).child(s as u64).child(view_path(*view)).child(frame_path(*frame));
                        let c = sampler::hierarchical_sample(dist, &model, epsilon2, &stream)?;
                        Ok(SampleRecord::from_contour(id, s, &c))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?,
        Some(joint) => {
            let pairs: Vec<(String, View)> = set
                .items
                .keys()
                .map(|(id, v, _)| (id.clone(), *v))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            pairs
                .par_iter()
                .enumerate()
                .map(|(i, (id, view))| {
                    let ed = set.get(id, *view, Frame::ED).ok_or_else(|| anyhow!("{id}/{view:?}: missing ED"))?;
                    let es = set.get(id, *view, Frame::ES).ok_or_else(|| anyhow!("{id}/{view:?}: missing ES"))?;
                    let mut mu = ed.mean_flat();
                    mu.extend(es.mean_flat());
                    let model = recenter_from_model(joint, &DVector::from_vec(mu))?;
                    let mut out = Vec::with_capacity(2 * n);
                    for s in 0..n {
                        let stream = root.child(i as u64).child(s as u64).child(view_path(*view));
                        let (a, b) = sampler::temporal_sample(ed, es, &model, epsilon2, &stream)?;
                        out.push(SampleRecord::from_contour(id, s, &a));
                        out.push(SampleRecord::from_contour(id, s, &b));
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(per_case.into_iter().flatten().collect())
}

fn sample(a: &SampleArgs) -> Result<()> {
    let set = load_predictions(&a.predictions)?;
    let single = load_model(&a.shape_model)?;
    let joint = match (&a.joint_model, a.temporal) {
        (Some(p), true) => Some(load_model(p)?),
        _ => None,
    };
    let records = sample_records(&set, &single, joint.as_ref(), a.n, a.epsilon2, a.seed)?;
    let flagged = records.iter().filter(|r| r.self_intersecting).count();
    if flagged > 0 {
        log::warn!("{flagged} of {} sampled contours self-intersect", records.len());
    }
    write_jsonl(&a.out_dir.join("samples.jsonl"), &records)
}

fn propagate(a: &PropagateArgs) -> Result<()> {
    let t_e = a.t_epistemic.unwrap_or(a.predictions.len());
    if t_e == 0 || t_e > a.predictions.len() {
        bail!("--t-epistemic {t_e} needs between 1 and {} prediction files", a.predictions.len());
    }
    let sets = a.predictions[..t_e].iter().map(|p| load_predictions(p)).collect::<Result<Vec<_>>>()?;
    let single = load_model(&a.shape_model)?;
    let joint = a.joint_model.as_deref().map(load_model).transpose()?;
    let settings = PropagationSettings {
        kind: a.metric.into(),
        t_a: a.t_aleatoric,
        epsilon2: a.epsilon2,
        temporal: a.temporal,
        volume: a.volume.options(),
        seed: a.seed,
    };
    let records = pipeline::propagate_all(&sets, &single, joint.as_ref(), &settings)?;
    let rejected = records.iter().filter(|r| r.rejected).count();
    log::info!("{} cases, {rejected} rejected", records.len());
    write_jsonl(&a.out_dir.join("report.jsonl"), &records)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub uncertainty: &'static str,
    pub metrics: Vec<MetricEvaluation>,
}

fn write_reliability(dir: &Path, prefix: &str, evals: &[MetricEvaluation]) -> Result<()> {
    for e in evals {
        let csv = reliability_csv(&reliability_table(&e.bins));
        write_atomic(&dir.join(format!("{prefix}{}.csv", e.metric)), csv.as_bytes())?;
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let records: Vec<PropagateRecord> = io::read_jsonl(&a.report_in)?;
    let truth = contour_set(io::read_contours(&a.ground_truth)?)?;
    let metrics = evaluate_report(&records, &truth, &a.volume.options(), a.bins, a.uce_use_variance)?;
    write_reliability(&a.out_dir, "reliability_", &metrics)?;
    let report = EvaluationReport { uncertainty: if a.uce_use_variance { "variance" } else { "sigma" }, metrics };
    write_json(&a.out_dir.join("report.json"), &report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EndToEndReport {
    pub config: SynthConfig,
    pub epsilon2: f64,
    pub t_aleatoric: usize,
    pub t_epistemic: usize,
    pub uncertainty: &'static str,
    pub single_model_rank: usize,
    pub joint_model_rank: usize,
    pub aleatoric: Vec<MetricEvaluation>,
    pub epistemic: Vec<MetricEvaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationStats>,
}

fn end_to_end(a: &EndToEndArgs) -> Result<u64> {
    let cfg = load_synth_config(a.config.as_deref(), a.seed)?;
    let seed = cfg.seed;
    let out = &a.out_dir;
    let args = serde_json::to_value(a)?;

    let t = Instant::now();
    let synth_dir = out.join("synth");
    let files = write_synth(&cfg, &synth_dir)?;
    stage_manifest("synth", args.clone(), Some(seed), &[], &synth_dir, t)?;

    let t = Instant::now();
    let training = io::read_contours(&files.contours)?;
    let single = fit_model(&training, ModelKind::Single)?;
    let joint = fit_model(&training, ModelKind::Joint)?;
    for (name, m) in [("single", &single), ("joint", &joint)] {
        let dir = out.join(format!("model_{name}"));
        write_json(&dir.join("shape_model.json"), &ShapeModelFile::from(m))?;
        stage_manifest("fit-shape-model", args.clone(), None, std::slice::from_ref(&files.contours), &dir, t)?;
    }

    let base = vec![load_predictions(&files.predictions)?];
    let t_e = a.t_epistemic.unwrap_or(cfg.n_epistemic).min(cfg.n_epistemic);
    let epistemic = files.epistemic[..t_e].iter().map(|p| load_predictions(p)).collect::<Result<Vec<_>>>()?;
    let truth = contour_set(io::read_contours(&files.truth)?)?;
    let volume: VolumeOptions = a.volume.options();

    let run =
        |label: &str, sets: &[PredictionSet], temporal: bool, inputs: Vec<PathBuf>| -> Result<Vec<MetricEvaluation>> {
            let t = Instant::now();
            let mut records = Vec::new();
            for kind in MetricKind::ALL {
                let settings = PropagationSettings {
                    kind,
                    t_a: a.t_aleatoric,
                    epsilon2: a.epsilon2,
                    temporal: temporal && matches!(kind, MetricKind::Fac | MetricKind::Ef),
                    volume,
                    seed,
                };
                records.extend(pipeline::propagate_all(sets, &single, Some(&joint), &settings)?);
            }
            let dir = out.join(format!("propagate_{label}"));
            write_jsonl(&dir.join("report.jsonl"), &records)?;
            stage_manifest("propagate", args.clone(), Some(seed), &inputs, &dir, t)?;
            let evals = evaluate_report(&records, &truth, &volume, a.bins, a.uce_use_variance)?;
            write_reliability(out, &format!("reliability_{label}_"), &evals)?;
            Ok(evals)
        };
    let aleatoric = run("aleatoric", &base, false, vec![files.predictions.clone()])?;
    let epistemic_evals = if epistemic.is_empty() {
        Vec::new()
    } else {
        run("epistemic", &epistemic, true, files.epistemic[..t_e].to_vec())?
    };

    let segmentation = if a.seg_grid > 0 {
        Some(segmentation_stats(&base[0], &single, &truth, a.t_aleatoric, a.epsilon2, a.seg_grid, seed, a.bins)?)
    } else {
        None
    };

    let report = EndToEndReport {
        config: cfg,
        epsilon2: a.epsilon2,
        t_aleatoric: a.t_aleatoric,
        t_epistemic: t_e,
        uncertainty: if a.uce_use_variance { "variance" } else { "sigma" },
        single_model_rank: single.rank(),
        joint_model_rank: joint.rank(),
        aleatoric,
        epistemic: epistemic_evals,
        segmentation,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(seed)
}
