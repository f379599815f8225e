//! Calibration measures: ECE, equal-count UCE, uncertainty/error mutual
//! information, Dice/uncertainty correlation and reliability tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SegmentationMask;
use crate::propagation::UncertaintyMap;

/// Number of uncertainty bins used for mutual information.
pub const MI_BINS: usize = 10;

/// One bin of a reliability diagram. For ECE `mean_x` is the confidence and
/// `mean_y` the accuracy; for UCE they are uncertainty and error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_x: f64,
    pub mean_y: f64,
}

fn weighted_gap(bins: &[CalibrationBin], n: usize) -> f64 {
    bins.iter().filter(|b| b.count > 0).map(|b| b.count as f64 / n as f64 * (b.mean_y - b.mean_x).abs()).sum()
}

/// Expected calibration error over `m_bins` equal-width bins on [0, 1].
pub fn ece(confidences: &[f64], correct: &[bool], m_bins: usize) -> Result<(f64, Vec<CalibrationBin>)> {
    let n = confidences.len();
    if n == 0 {
        return Err(Error::Empty("no samples".into()));
    }
    if correct.len() != n {
        return Err(Error::Dimension(format!("{n} confidences, {} labels", correct.len())));
    }
    if m_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
    }
    let mut sum_c = vec![0.0; m_bins];
    let mut sum_a = vec![0.0; m_bins];
    let mut count = vec![0usize; m_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * m_bins as f64) as usize).min(m_bins - 1);
        sum_c[b] += c;
        sum_a[b] += ok as u8 as f64;
        count[b] += 1;
    }
    let bins: Vec<CalibrationBin> = (0..m_bins)
        .map(|b| {
            let cnt = count[b].max(1) as f64;
            CalibrationBin {
                lo: b as f64 / m_bins as f64,
                hi: (b + 1) as f64 / m_bins as f64,
                count: count[b],
                mean_x: sum_c[b] / cnt,
                mean_y: sum_a[b] / cnt,
            }
        })
        .collect();
    Ok((weighted_gap(&bins, n), bins))
}

/// Uncertainty calibration error with sample indices as tie-breakers.
pub fn uce_equal_count(errors: &[f64], uncertainties: &[f64], m_bins: usize) -> Result<(f64, Vec<CalibrationBin>)> {
    let ids: Vec<usize> = (0..errors.len()).collect();
    uce_equal_count_with_ids(errors, uncertainties, &ids, m_bins)
}

/// Uncertainty calibration error over `m_bins` equal-count bins. Samples are
/// ordered by `(uncertainty, id)`; the first `N mod m_bins` bins take one
/// extra sample.
pub fn uce_equal_count_with_ids<T: Ord>(
    errors: &[f64],
    uncertainties: &[f64],
    ids: &[T],
    m_bins: usize,
) -> Result<(f64, Vec<CalibrationBin>)> {
    let n = errors.len();
    if uncertainties.len() != n || ids.len() != n {
        return Err(Error::Dimension(format!("{n} errors, {} uncertainties, {} ids", uncertainties.len(), ids.len())));
    }
    if m_bins == 0 || n < m_bins {
        return Err(Error::InvalidArgument(format!("{n} samples for {m_bins} bins")));
    }
    if errors.iter().chain(uncertainties).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("error or uncertainty".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]).then_with(|| ids[a].cmp(&ids[b])));
    let base = n / m_bins;
    let extra = n % m_bins;
    let mut bins = Vec::with_capacity(m_bins);
    let mut start = 0;
    for b in 0..m_bins {
        let size = base + usize::from(b < extra);
        let members = &order[start..start + size];
        start += size;
        let mean = |v: &[f64]| members.iter().map(|&i| v[i]).sum::<f64>() / size as f64;
        bins.push(CalibrationBin {
            lo: uncertainties[members[0]],
            hi: uncertainties[members[size - 1]],
            count: size,
            mean_x: mean(uncertainties),
            mean_y: mean(errors),
        });
    }
    Ok((weighted_gap(&bins, n), bins))
}

/// Mutual information (nats) between binned values in [0, 1] and binary labels.
pub fn mutual_information_binned(values: &[f64], labels: &[bool], bins: usize) -> Result<f64> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Empty("no pixels".into()));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} values, {} labels", labels.len())));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut joint = vec![[0usize; 2]; bins];
    for (&v, &l) in values.iter().zip(labels) {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        joint[b][l as usize] += 1;
    }
    let nf = n as f64;
    let col = [0, 1].map(|l| joint.iter().map(|r| r[l]).sum::<usize>() as f64 / nf);
    let mut mi = 0.0;
    for row in &joint {
        let p_row = (row[0] + row[1]) as f64 / nf;
        for l in 0..2 {
            if row[l] > 0 {
                let p = row[l] as f64 / nf;
                mi += p * (p / (p_row * col[l])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Mutual information between an uncertainty map (10 equal-width bins) and a
/// binary error map, in nats.
pub fn mutual_information(unc_map: &UncertaintyMap, err_map: &SegmentationMask) -> Result<f64> {
    if unc_map.height() != err_map.height() || unc_map.width() != err_map.width() {
        return Err(Error::Dimension("uncertainty and error maps differ in shape".into()));
    }
    mutual_information_binned(unc_map.data(), err_map.data(), MI_BINS)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Dimension(format!("{n} vs {} values", y.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two values".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::InvalidArgument("zero variance".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Negative Pearson correlation; higher means uncertainty tracks failure.
pub fn dice_uncertainty_correlation(dices: &[f64], image_uncertainties: &[f64]) -> Result<f64> {
    Ok(-pearson(dices, image_uncertainties)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub count: usize,
}

/// Rows for the non-empty bins.
pub fn reliability_table(bins: &[CalibrationBin]) -> Vec<ReliabilityRow> {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| ReliabilityRow { bin_lo: b.lo, bin_hi: b.hi, mean_x: b.mean_x, mean_y: b.mean_y, count: b.count })
        .collect()
}

pub fn reliability_csv(rows: &[ReliabilityRow]) -> String {
    let mut out = String::from("bin_lo,bin_hi,mean_x,mean_y,count\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.bin_lo, r.bin_hi, r.mean_x, r.mean_y, r.count);
    }
    out
}

/// Fraction of samples with `|error| <= z * sigma`.
pub fn interval_coverage(errors: &[f64], sigmas: &[f64], z: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    if errors.len() != sigmas.len() {
        return Err(Error::Dimension("errors and sigmas differ in length".into()));
    }
    let hits = errors.iter().zip(sigmas).filter(|(e, s)| e.abs() <= z * **s).count();
    Ok(hits as f64 / errors.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr: Option<f64>,
    pub bins: Vec<CalibrationBin>,
    pub rejected_percent: f64,
}
