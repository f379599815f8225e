//! Clinical metrics: LV area, fractional area change, biplane volume and
//! ejection fraction.
//!
//! Areas are in mm², volumes in mL, FAC and EF are fractions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{shoelace_area, Contour};
use crate::linalg::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Area,
    Fac,
    Volume,
    Ef,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [MetricKind::Area, MetricKind::Fac, MetricKind::Volume, MetricKind::Ef];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Area => "area",
            MetricKind::Fac => "fac",
            MetricKind::Volume => "volume",
            MetricKind::Ef => "ef",
        }
    }

    /// Whether `value` is admissible for this metric: Area and Volume must be
    /// positive, FAC and EF must lie in (0, 1).
    pub fn is_valid(self, value: f64) -> bool {
        if !value.is_finite() {
            return false;
        }
        match self {
            MetricKind::Area | MetricKind::Volume => value > 0.0,
            MetricKind::Fac | MetricKind::Ef => value > 0.0 && value < 1.0,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "area" => Ok(MetricKind::Area),
            "fac" => Ok(MetricKind::Fac),
            "volume" => Ok(MetricKind::Volume),
            "ef" => Ok(MetricKind::Ef),
            other => Err(Error::InvalidArgument(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: f64,
    pub valid: bool,
}

impl MetricValue {
    pub fn new(kind: MetricKind, value: f64) -> Self {
        Self { kind, value, valid: kind.is_valid(value) }
    }
}

/// Area of the closed contour polygon in mm².
pub fn polygon_area(contour: &Contour) -> f64 {
    let [sy, sx] = contour.spacing_mm;
    let area = shoelace_area(contour.polygon()) * sx * sy;
    if area == 0.0 {
        log::warn!("degenerate contour polygon has zero area");
    }
    area
}

fn change_fraction(before: f64, after: f64, what: &str) -> Result<f64> {
    if !(before > 0.0) || !before.is_finite() || !after.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "{what} requires a positive finite ED value, got ({before}, {after})"
        )));
    }
    Ok((before - after) / before)
}

/// Fractional area change `(ED − ES) / ED`.
pub fn fac(area_ed: f64, area_es: f64) -> Result<f64> {
    change_fraction(area_ed, area_es, "FAC")
}

/// Ejection fraction `(ED − ES) / ED`.
pub fn ef(vol_ed: f64, vol_es: f64) -> Result<f64> {
    change_fraction(vol_ed, vol_es, "EF")
}

/// How the common long-axis length is chosen from the two views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisRule {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeOptions {
    pub n_disks: usize,
    pub axis: AxisRule,
}

impl Default for VolumeOptions {
    fn default() -> Self {
        Self { n_disks: 20, axis: AxisRule::Max }
    }
}

/// Long axis of one view in mm: basal midpoint, unit direction to the apex,
/// and length.
fn long_axis(points: &[Vec2], contour: &Contour) -> Result<(Vec2, Vec2, f64)> {
    let lm = contour.landmarks;
    let base = (points[lm.basal1] + points[lm.basal2]) * 0.5;
    let axis = points[lm.apex] - base;
    let length = axis.norm();
    if !(length > 0.0) || !length.is_finite() {
        return Err(Error::InvalidArgument("apex coincides with the basal midpoint".into()));
    }
    Ok((base, axis / length, length))
}

/// Width of the closed polygon along the line through `center` perpendicular
/// to `dir`, taken between the outermost crossings.
fn chord_width(poly: &[Vec2], center: &Vec2, dir: &Vec2) -> f64 {
    let normal = Vec2::new(-dir.y, dir.x);
    let n = poly.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let sp = (p - center).dot(dir);
        let sq = (q - center).dot(dir);
        // Half-open so that a vertex on the line is counted once.
        if (sp <= 0.0 && sq > 0.0) || (sq <= 0.0 && sp > 0.0) {
            let t = sp / (sp - sq);
            let x = p + (q - p) * t;
            let u = (x - center).dot(&normal);
            lo = lo.min(u);
            hi = hi.max(u);
        }
    }
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

fn chord_widths(contour: &Contour, n: usize) -> Result<(Vec<f64>, f64)> {
    let pts = contour.physical_points();
    let (base, dir, length) = long_axis(&pts, contour)?;
    let lm = contour.landmarks;
    let poly = &pts[lm.basal1..=lm.basal2];
    let widths = (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            chord_width(poly, &(base + dir * (t * length)), &dir)
        })
        .collect();
    Ok((widths, length))
}

/// Simpson biplane method of disks, in mL.
pub fn simpson_biplane_volume(a4c: &Contour, a2c: &Contour, options: &VolumeOptions) -> Result<f64> {
    let n = options.n_disks;
    if n == 0 {
        return Err(Error::InvalidArgument("n_disks must be at least 1".into()));
    }
    let (a, la) = chord_widths(a4c, n)?;
    let (b, lb) = chord_widths(a2c, n)?;
    let length = match options.axis {
        AxisRule::Max => la.max(lb),
        AxisRule::Mean => 0.5 * (la + lb),
    };
    let sum: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let mm3 = PI / 4.0 * (length / n as f64) * sum;
    Ok(mm3 / 1000.0)
}
