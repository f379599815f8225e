//! Case assembly, per-case metric propagation and evaluation shared by the
//! subcommands.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use casus_core::calibration::{self, CalibrationBin};
use casus_core::geometry::{dice, rasterize_contour};
use casus_core::metrics::{self, polygon_area, simpson_biplane_volume, VolumeOptions};
use casus_core::propagation::{self, entropy_map, image_level_uncertainty, RejectionReason};
use casus_core::sampler::{self, frame_path};
use casus_core::shape_model::{recenter_from_model, ShapeModel};
use casus_core::{Contour, ContourDistribution, Frame, MetricKind, RandomStream, SegmentationMask, View};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const VIEWS: [View; 2] = [View::A4C, View::A2C];
pub const FRAMES: [Frame; 2] = [Frame::ED, Frame::ES];

pub fn view_path(view: View) -> u64 {
    match view {
        View::A4C => 0,
        View::A2C => 1,
    }
}

/// Identifies what a metric value belongs to: area per (id, view, frame),
/// FAC per (id, view), volume per (id, frame), EF per id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CaseKey {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<View>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<Frame>,
}

impl std::fmt::Display for CaseKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.id)?;
        if let Some(v) = self.view {
            write!(f, "/{v:?}")?;
        }
        if let Some(fr) = self.frame {
            write!(f, "/{fr:?}")?;
        }
        Ok(())
    }
}

pub type ImageKey = (String, View, Frame);

/// Contours or predictions indexed by (id, view, frame).
#[derive(Debug, Clone)]
pub struct Indexed<T> {
    pub items: BTreeMap<ImageKey, T>,
}

impl<T> Indexed<T> {
    pub fn build(entries: Vec<(String, T)>, view_frame: impl Fn(&T) -> (View, Frame)) -> Result<Self> {
        let mut items = BTreeMap::new();
        for (id, item) in entries {
            let (v, f) = view_frame(&item);
            let key = (id, v, f);
            if items.contains_key(&key) {
                bail!("duplicate record for {}/{:?}/{:?}", key.0, key.1, key.2);
            }
            items.insert(key, item);
        }
        Ok(Self { items })
    }

    pub fn get(&self, id: &str, view: View, frame: Frame) -> Option<&T> {
        self.items.get(&(id.to_string(), view, frame))
    }

    fn need(&self, id: &str, view: View, frame: Frame) -> Result<&T> {
        self.get(id, view, frame).ok_or_else(|| anyhow!("missing record for {id}/{view:?}/{frame:?}"))
    }

    pub fn keys(&self, kind: MetricKind) -> Vec<CaseKey> {
        let mut keys: Vec<CaseKey> = self
            .items
            .keys()
            .map(|(id, v, f)| match kind {
                MetricKind::Area => CaseKey { id: id.clone(), view: Some(*v), frame: Some(*f) },
                MetricKind::Fac => CaseKey { id: id.clone(), view: Some(*v), frame: None },
                MetricKind::Volume => CaseKey { id: id.clone(), view: None, frame: Some(*f) },
                MetricKind::Ef => CaseKey { id: id.clone(), view: None, frame: None },
            })
            .collect();
        keys.sort();
        keys.dedup();
        keys
    }
}

pub type PredictionSet = Indexed<ContourDistribution>;
pub type ContourSet = Indexed<Contour>;

pub fn prediction_set(entries: Vec<(String, ContourDistribution)>) -> Result<PredictionSet> {
    Indexed::build(entries, |d| (d.view, d.frame))
}

pub fn contour_set(entries: Vec<(String, Contour)>) -> Result<ContourSet> {
    Indexed::build(entries, |c| (c.view, c.frame))
}

/// Evaluates metric `kind` for `key` on arbitrary contours.
pub fn evaluate_metric(
    kind: MetricKind,
    key: &CaseKey,
    volume: &VolumeOptions,
    mut contour: impl FnMut(View, Frame) -> Result<Contour>,
) -> Result<f64> {
    let need_view = || key.view.ok_or_else(|| anyhow!("{key}: missing view"));
    let need_frame = || key.frame.ok_or_else(|| anyhow!("{key}: missing frame"));
    Ok(match kind {
        MetricKind::Area => polygon_area(&contour(need_view()?, need_frame()?)?),
        MetricKind::Fac => {
            let v = need_view()?;
            metrics::fac(polygon_area(&contour(v, Frame::ED)?), polygon_area(&contour(v, Frame::ES)?))?
        }
        MetricKind::Volume => {
            let f = need_frame()?;
            simpson_biplane_volume(&contour(View::A4C, f)?, &contour(View::A2C, f)?, volume)?
        }
        MetricKind::Ef => {
            let ed = simpson_biplane_volume(&contour(View::A4C, Frame::ED)?, &contour(View::A2C, Frame::ED)?, volume)?;
            let es = simpson_biplane_volume(&contour(View::A4C, Frame::ES)?, &contour(View::A2C, Frame::ES)?, volume)?;
            metrics::ef(ed, es)?
        }
    })
}

/// Metric of the ground-truth contours.
pub fn truth_value(kind: MetricKind, key: &CaseKey, truth: &ContourSet, volume: &VolumeOptions) -> Result<f64> {
    evaluate_metric(kind, key, volume, |v, f| Ok(truth.need(&key.id, v, f)?.clone()))
}

#[derive(Debug, Clone)]
pub struct PropagationSettings {
    pub kind: MetricKind,
    pub t_a: usize,
    pub epsilon2: f64,
    pub temporal: bool,
    pub volume: VolumeOptions,
    pub seed: u64,
}

/// Shape models recentered on one epistemic prediction set for one case.
struct CaseModels<'a> {
    set: &'a PredictionSet,
    single: BTreeMap<(View, Frame), ShapeModel>,
    joint: BTreeMap<View, ShapeModel>,
}

fn views_for(key: &CaseKey) -> Vec<View> {
    key.view.map_or(VIEWS.to_vec(), |v| vec![v])
}

fn frames_for(kind: MetricKind, key: &CaseKey) -> Vec<Frame> {
    match kind {
        MetricKind::Area | MetricKind::Volume => key.frame.map_or(FRAMES.to_vec(), |f| vec![f]),
        MetricKind::Fac | MetricKind::Ef => FRAMES.to_vec(),
    }
}

impl<'a> CaseModels<'a> {
    fn prepare(
        set: &'a PredictionSet,
        key: &CaseKey,
        settings: &PropagationSettings,
        single: &ShapeModel,
        joint: Option<&ShapeModel>,
    ) -> Result<Self> {
        let mut out = CaseModels { set, single: BTreeMap::new(), joint: BTreeMap::new() };
        let paired = matches!(settings.kind, MetricKind::Fac | MetricKind::Ef);
        for view in views_for(key) {
            if paired && settings.temporal {
                let joint = joint.ok_or_else(|| anyhow!("temporal sampling needs a joint model"))?;
                let ed = set.need(&key.id, view, Frame::ED)?;
                let es = set.need(&key.id, view, Frame::ES)?;
                let mut mu = ed.mean_flat();
                mu.extend(es.mean_flat());
                out.joint.insert(view, recenter_from_model(joint, &DVector::from_vec(mu))?);
                continue;
            }
            for frame in frames_for(settings.kind, key) {
                let d = set.need(&key.id, view, frame)?;
                let model = recenter_from_model(single, &DVector::from_vec(d.mean_flat()))?;
                out.single.insert((view, frame), model);
            }
        }
        Ok(out)
    }

    fn dist(&self, id: &str, view: View, frame: Frame) -> Result<&ContourDistribution> {
        self.set.need(id, view, frame)
    }

    /// One joint draw of every contour the metric needs.
    fn draw(
        &self,
        key: &CaseKey,
        settings: &PropagationSettings,
        stream: &RandomStream,
    ) -> Result<BTreeMap<(View, Frame), Contour>> {
        let mut out = BTreeMap::new();
        for view in views_for(key) {
            let vs = stream.child(view_path(view));
            if let Some(joint) = self.joint.get(&view) {
                let (ed, es) = sampler::temporal_sample(
                    self.dist(&key.id, view, Frame::ED)?,
                    self.dist(&key.id, view, Frame::ES)?,
                    joint,
                    settings.epsilon2,
                    &vs,
                )?;
                out.insert((view, Frame::ED), ed);
                out.insert((view, Frame::ES), es);
                continue;
            }
            for frame in frames_for(settings.kind, key) {
                let model = &self.single[&(view, frame)];
                let c = sampler::hierarchical_sample(
                    self.dist(&key.id, view, frame)?,
                    model,
                    settings.epsilon2,
                    &vs.child(frame_path(frame)),
                )?;
                out.insert((view, frame), c);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagateRecord {
    #[serde(flatten)]
    pub key: CaseKey,
    pub metric: MetricKind,
    /// Mean over prediction sets of the metric of the mean contours.
    pub prediction: f64,
    pub mu: Option<f64>,
    pub sigma2_aleatoric: Option<f64>,
    pub sigma2_epistemic: Option<f64>,
    pub sigma2: Option<f64>,
    pub n_cells: usize,
    pub n_rejected_cells: usize,
    pub rejected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection_reason: Option<RejectionReason>,
}

fn case_stream(settings: &PropagationSettings, index: usize) -> RandomStream {
    let tag = MetricKind::ALL.iter().position(|k| *k == settings.kind).unwrap_or(0) as u64;
    RandomStream::new(settings.seed).child(tag).child(index as u64)
}

/// Propagates one case through `T_e = sets.len()` prediction sets and
/// `T_a` aleatoric draws each.
pub fn propagate_case(
    key: &CaseKey,
    index: usize,
    sets: &[PredictionSet],
    single: &ShapeModel,
    joint: Option<&ShapeModel>,
    settings: &PropagationSettings,
) -> Result<PropagateRecord> {
    let kind = settings.kind;
    let mut prediction = 0.0;
    for set in sets {
        prediction += evaluate_metric(kind, key, &settings.volume, |v, f| Ok(set.need(&key.id, v, f)?.mean_contour()))
            .with_context(|| format!("{key}: metric of the mean prediction"))?;
    }
    prediction /= sets.len() as f64;
    let models =
        sets.iter().map(|s| CaseModels::prepare(s, key, settings, single, joint)).collect::<Result<Vec<_>>>()?;
    let grid = propagation::propagate(kind, sets.len(), settings.t_a, &case_stream(settings, index), |i, stream| {
        let drawn =
            models[i].draw(key, settings, stream).map_err(|e| casus_core::Error::InvalidArgument(e.to_string()))?;
        evaluate_metric(kind, key, &settings.volume, |v, f| {
            drawn.get(&(v, f)).cloned().ok_or_else(|| anyhow!("contour not drawn"))
        })
        .map_err(|e| casus_core::Error::InvalidArgument(e.to_string()))
    })?;
    let outcome = propagation::reject_case(&grid, prediction);
    let d = outcome.decomposition;
    Ok(PropagateRecord {
        key: key.clone(),
        metric: kind,
        prediction,
        mu: d.map(|d| d.mu_f),
        sigma2_aleatoric: d.map(|d| d.sigma2_aleatoric),
        sigma2_epistemic: d.map(|d| d.sigma2_epistemic),
        sigma2: d.map(|d| d.sigma2_predictive),
        n_cells: grid.len(),
        n_rejected_cells: outcome.n_rejected_cells,
        rejected: !outcome.kept(),
        rejection_reason: outcome.rejected,
    })
}

/// Propagates every case for `settings.kind`, in key order.
pub fn propagate_all(
    sets: &[PredictionSet],
    single: &ShapeModel,
    joint: Option<&ShapeModel>,
    settings: &PropagationSettings,
) -> Result<Vec<PropagateRecord>> {
    let first = sets.first().ok_or_else(|| anyhow!("no prediction sets"))?;
    let keys = first.keys(settings.kind);
    keys.par_iter().enumerate().map(|(i, key)| propagate_case(key, i, sets, single, joint, settings)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEvaluation {
    pub metric: MetricKind,
    pub n_cases: usize,
    pub n_kept: usize,
    pub rejected_percent: f64,
    pub mean_abs_error: Option<f64>,
    pub mean_uncertainty: Option<f64>,
    pub uce: Option<f64>,
    pub coverage_95: Option<f64>,
    pub bins: Vec<CalibrationBin>,
}

/// UCE, interval coverage and rejection rate of the records of one metric.
pub fn evaluate_records(
    kind: MetricKind,
    records: &[&PropagateRecord],
    truth: &ContourSet,
    volume: &VolumeOptions,
    m_bins: usize,
    use_variance: bool,
) -> Result<MetricEvaluation> {
    let n_cases = records.len();
    let kept: Vec<&&PropagateRecord> = records.iter().filter(|r| !r.rejected).collect();
    let rejected_percent = if n_cases == 0 { 0.0 } else { 100.0 * (n_cases - kept.len()) as f64 / n_cases as f64 };
    let mut errors = Vec::with_capacity(kept.len());
    let mut sigmas = Vec::with_capacity(kept.len());
    let mut ids = Vec::with_capacity(kept.len());
    for r in &kept {
        let t = truth_value(kind, &r.key, truth, volume).with_context(|| format!("{}: ground truth", r.key))?;
        let s2 = r.sigma2.ok_or_else(|| anyhow!("{}: kept case without variance", r.key))?;
        errors.push((r.prediction - t).abs());
        sigmas.push(s2.max(0.0).sqrt());
        ids.push(r.key.clone());
    }
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let unc: Vec<f64> = if use_variance { sigmas.iter().map(|s| s * s).collect() } else { sigmas.clone() };
    let (uce, bins) = if errors.len() >= m_bins && m_bins > 0 {
        let (u, b) = calibration::uce_equal_count_with_ids(&errors, &unc, &ids, m_bins)?;
        (Some(u), b)
    } else {
        (None, Vec::new())
    };
    let coverage_95 =
        if errors.is_empty() { None } else { Some(calibration::interval_coverage(&errors, &sigmas, 1.96)?) };
    Ok(MetricEvaluation {
        metric: kind,
        n_cases,
        n_kept: kept.len(),
        rejected_percent,
        mean_abs_error: mean(&errors),
        mean_uncertainty: mean(&unc),
        uce,
        coverage_95,
        bins,
    })
}

pub fn evaluate_report(
    records: &[PropagateRecord],
    truth: &ContourSet,
    volume: &VolumeOptions,
    m_bins: usize,
    use_variance: bool,
) -> Result<Vec<MetricEvaluation>> {
    MetricKind::ALL
        .iter()
        .filter_map(|&kind| {
            let subset: Vec<&PropagateRecord> = records.iter().filter(|r| r.metric == kind).collect();
            if subset.is_empty() {
                None
            } else {
                Some(evaluate_records(kind, &subset, truth, volume, m_bins, use_variance))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationStats {
    pub n_images: usize,
    pub grid: usize,
    pub mean_dice: f64,
    /// Negative Pearson correlation of image uncertainty with Dice.
    pub corr: Option<f64>,
    /// Pixel ECE with confidence `1 - u`, averaged over images.
    pub ece: f64,
    /// Uncertainty/error mutual information in nats, averaged over images.
    pub mi: f64,
}

struct ImageStats {
    dice: f64,
    uncertainty: f64,
    ece: f64,
    mi: f64,
}

/// Segmentation-level uncertainty statistics from rasterized contour samples.
#[allow(clippy::too_many_arguments)]
pub fn segmentation_stats(
    set: &PredictionSet,
    single: &ShapeModel,
    truth: &ContourSet,
    t_samples: usize,
    epsilon2: f64,
    grid: usize,
    seed: u64,
    m_bins: usize,
) -> Result<SegmentationStats> {
    let keys: Vec<&ImageKey> = set.items.keys().collect();
    let stats: Vec<ImageStats> = keys
        .par_iter()
        .enumerate()
        .map(|(index, key)| -> Result<ImageStats> {
            let dist = &set.items[*key];
            let gt = truth.need(&key.0, key.1, key.2)?;
            let model = recenter_from_model(single, &DVector::from_vec(dist.mean_flat()))?;
            let stream = RandomStream::new(seed).child(index as u64);
            let masks = (0..t_samples)
                .map(|s| {
                    let c = sampler::hierarchical_sample(dist, &model, epsilon2, &stream.child(s as u64))?;
                    Ok(rasterize_contour(&c, grid, grid)?.mask)
                })
                .collect::<Result<Vec<SegmentationMask>>>()?;
            let unc = entropy_map(&masks)?;
            let mean_mask = rasterize_contour(&dist.mean_contour(), grid, grid)?.mask;
            let gt_mask = rasterize_contour(gt, grid, grid)?.mask;
            let correct: Vec<bool> = mean_mask.data().iter().zip(gt_mask.data()).map(|(a, b)| a == b).collect();
            let err = SegmentationMask::from_vec(grid, grid, correct.iter().map(|c| !c).collect())?;
            let conf: Vec<f64> = unc.data().iter().map(|u| 1.0 - u).collect();
            Ok(ImageStats {
                dice: dice(&mean_mask, &gt_mask)?,
                uncertainty: image_level_uncertainty(&unc, &mean_mask)?,
                ece: calibration::ece(&conf, &correct, m_bins)?.0,
                mi: calibration::mutual_information(&unc, &err)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = stats.len();
    if n == 0 {
        bail!("no images to evaluate");
    }
    let avg = |f: fn(&ImageStats) -> f64| stats.iter().map(f).sum::<f64>() / n as f64;
    let dices: Vec<f64> = stats.iter().map(|s| s.dice).collect();
    let uncs: Vec<f64> = stats.iter().map(|s| s.uncertainty).collect();
    Ok(SegmentationStats {
        n_images: n,
        grid,
        mean_dice: avg(|s| s.dice),
        corr: calibration::dice_uncertainty_correlation(&dices, &uncs).ok(),
        ece: avg(|s| s.ece),
        mi: avg(|s| s.mi),
    })
}
