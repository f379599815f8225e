//! Monte-Carlo propagation of contour uncertainty through a metric, the
//! aleatoric/epistemic variance split, rejection rules and entropy maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SegmentationMask;
use crate::metrics::MetricKind;
use crate::rng::RandomStream;

pub const DEFAULT_T_ALEATORIC: usize = 25;
pub const DEFAULT_T_EPISTEMIC: usize = 10;

/// `t_e x t_a` metric values; row `i` holds the aleatoric draws under
/// epistemic sample `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSampleGrid {
    pub kind: MetricKind,
    pub t_e: usize,
    pub t_a: usize,
    /// Row-major.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl MetricSampleGrid {
    /// Grid from row vectors; validity follows the metric's value rules.
    pub fn from_rows(kind: MetricKind, rows: &[Vec<f64>]) -> Result<Self> {
        let t_e = rows.len();
        let t_a = rows.first().map_or(0, Vec::len);
        if t_e == 0 || t_a == 0 {
            return Err(Error::Empty("metric grid".into()));
        }
        if rows.iter().any(|r| r.len() != t_a) {
            return Err(Error::Dimension("ragged metric grid".into()));
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        let valid = values.iter().map(|&v| kind.is_valid(v)).collect();
        Ok(Self { kind, t_e, t_a, values, valid })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.t_a + j]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.t_a + j]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.t_a..(i + 1) * self.t_a]
    }
}

/// Evaluates `cell(i, stream)` for every epistemic row `i` and aleatoric
/// column `j`, with `stream = rng.child(i).child(j)`. Cells run in parallel;
/// a cell that errors or yields an inadmissible value is marked invalid.
pub fn propagate<F>(kind: MetricKind, t_e: usize, t_a: usize, rng: &RandomStream, cell: F) -> Result<MetricSampleGrid>
where
    F: Fn(usize, &RandomStream) -> Result<f64> + Sync,
{
    if t_e == 0 || t_a == 0 {
        return Err(Error::InvalidArgument(format!("T_e = {t_e}, T_a = {t_a}; both must be >= 1")));
    }
    let results: Vec<(f64, bool)> = (0..t_e * t_a)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / t_a, idx % t_a);
            let stream = rng.child(i as u64).child(j as u64);
            match cell(i, &stream) {
                Ok(v) => (v, kind.is_valid(v)),
                Err(e) => {
                    log::debug!("metric cell ({i}, {j}) failed: {e}");
                    (f64::NAN, false)
                }
            }
        })
        .collect();
    let (values, valid) = results.into_iter().unzip();
    Ok(MetricSampleGrid { kind, t_e, t_a, values, valid })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDecomposition {
    pub mu_f: f64,
    pub sigma2_aleatoric: f64,
    pub sigma2_epistemic: f64,
    pub sigma2_predictive: f64,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Law-of-total-variance split with population variances. Invalid cells are
/// left out of their row; rows without valid cells are dropped.
pub fn decompose(grid: &MetricSampleGrid) -> Result<UncertaintyDecomposition> {
    let mut row_means = Vec::with_capacity(grid.t_e);
    let mut row_vars = Vec::with_capacity(grid.t_e);
    for i in 0..grid.t_e {
        let row: Vec<f64> = (0..grid.t_a).filter(|&j| grid.is_valid(i, j)).map(|j| grid.get(i, j)).collect();
        if row.is_empty() {
            continue;
        }
        let (m, v) = mean_var(&row);
        row_means.push(m);
        row_vars.push(v);
    }
    if row_means.is_empty() {
        return Err(Error::Empty("no valid cells in metric grid".into()));
    }
    let (mu_f, sigma2_epistemic) = mean_var(&row_means);
    let sigma2_aleatoric = row_vars.iter().sum::<f64>() / row_vars.len() as f64;
    Ok(UncertaintyDecomposition {
        mu_f,
        sigma2_aleatoric,
        sigma2_epistemic,
        sigma2_predictive: sigma2_aleatoric + sigma2_epistemic,
    })
}

/// Which rule removed a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    /// The prediction itself has an inadmissible value.
    InvalidPrediction,
    /// More than half of the Monte-Carlo cells were discarded.
    TooManyInvalidSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub n_rejected_cells: usize,
    pub rejected: Option<RejectionReason>,
    pub decomposition: Option<UncertaintyDecomposition>,
}

impl CaseOutcome {
    pub fn kept(&self) -> bool {
        self.rejected.is_none()
    }
}

/// Applies, in order: reject when the prediction is inadmissible; discard
/// inadmissible cells; reject when more than 50% were discarded.
pub fn reject_case(grid: &MetricSampleGrid, prediction_value: f64) -> CaseOutcome {
    let n_rejected_cells = grid.invalid_count();
    if !grid.kind.is_valid(prediction_value) {
        return CaseOutcome {
            n_rejected_cells,
            rejected: Some(RejectionReason::InvalidPrediction),
            decomposition: None,
        };
    }
    if 2 * n_rejected_cells > grid.len() {
        return CaseOutcome {
            n_rejected_cells,
            rejected: Some(RejectionReason::TooManyInvalidSamples),
            decomposition: None,
        };
    }
    match decompose(grid) {
        Ok(d) => CaseOutcome { n_rejected_cells, rejected: None, decomposition: Some(d) },
        Err(_) => CaseOutcome {
            n_rejected_cells,
            rejected: Some(RejectionReason::TooManyInvalidSamples),
            decomposition: None,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionSummary {
    pub outcomes: Vec<CaseOutcome>,
    pub n_total: usize,
    pub n_rejected: usize,
    pub rejected_percent: f64,
}

impl RejectionSummary {
    pub fn from_outcomes(outcomes: Vec<CaseOutcome>) -> Self {
        let n_total = outcomes.len();
        let n_rejected = outcomes.iter().filter(|o| !o.kept()).count();
        let rejected_percent = if n_total == 0 { 0.0 } else { 100.0 * n_rejected as f64 / n_total as f64 };
        Self { outcomes, n_total, n_rejected, rejected_percent }
    }
}

pub fn reject(cases: &[(MetricSampleGrid, f64)]) -> RejectionSummary {
    RejectionSummary::from_outcomes(cases.iter().map(|(g, p)| reject_case(g, *p)).collect())
}

/// Per-pixel normalized entropy, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl UncertaintyMap {
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!("{} values for a {height}x{width} map", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("uncertainty values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Binary entropy of the foreground frequency, normalized by `ln 2`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { q * q.ln() } else { 0.0 };
    (-(term(p) + term(1.0 - p)) / std::f64::consts::LN_2).clamp(0.0, 1.0)
}

/// Entropy of the mean of `T` binary sample masks (two classes).
pub fn entropy_map(masks: &[SegmentationMask]) -> Result<UncertaintyMap> {
    let first = masks.first().ok_or_else(|| Error::Empty("no sample masks".into()))?;
    if masks.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::Dimension("sample masks differ in shape".into()));
    }
    let t = masks.len() as f64;
    let mut counts = vec![0usize; first.data().len()];
    for m in masks {
        for (c, &v) in counts.iter_mut().zip(m.data()) {
            *c += v as usize;
        }
    }
    let data = counts.iter().map(|&c| binary_entropy(c as f64 / t)).collect();
    UncertaintyMap::from_vec(first.height(), first.width(), data)
}

/// Sum of the map divided by the foreground size of the mean mask (at least 1).
pub fn image_level_uncertainty(map: &UncertaintyMap, mean_mask: &SegmentationMask) -> Result<f64> {
    if map.height != mean_mask.height() || map.width != mean_mask.width() {
        return Err(Error::Dimension("uncertainty map and mask differ in shape".into()));
    }
    Ok(map.sum() / mean_mask.count().max(1) as f64)
}
