//! Contours, binary masks and the polygon routines shared by every other
//! module.
//!
//! Coordinates are normalized to `[-1, 1]` on both axes: `x` runs along image
//! columns and `y` along image rows. The center of pixel `(row i, col j)`
//! (0-based) sits at `x = (2j + 1 - W) / W`, `y = (2i + 1 - H) / H`.

use serde::{Deserialize, Serialize};

use crate::error::{ContourError, Error, Result};
use crate::linalg::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    A2C,
    A4C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Frame {
    ED,
    ES,
}

impl Frame {
    pub fn other(self) -> Frame {
        match self {
            Frame::ED => Frame::ES,
            Frame::ES => Frame::ED,
        }
    }
}

/// Indices of the two basal points and the apex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Landmarks {
    pub basal1: usize,
    pub apex: usize,
    pub basal2: usize,
}

impl Landmarks {
    pub fn new(basal1: usize, apex: usize, basal2: usize) -> Self {
        Self { basal1, apex, basal2 }
    }

    /// `(0, (K-1)/2, K-1)`, the layout every sampler in this crate expects.
    pub fn canonical(k: usize) -> Self {
        Self::new(0, k.saturating_sub(1) / 2, k.saturating_sub(1))
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.basal1, self.apex, self.basal2]
    }

    pub fn check(&self, k: usize) -> std::result::Result<(), ContourError> {
        for index in self.as_array() {
            if index >= k {
                return Err(ContourError::LandmarkOutOfRange { index, len: k });
            }
        }
        if self.basal1 == self.apex || self.apex == self.basal2 || self.basal1 == self.basal2 {
            return Err(ContourError::DuplicateLandmarks);
        }
        if !(self.basal1 < self.apex && self.apex < self.basal2) {
            return Err(ContourError::LandmarkOrder);
        }
        Ok(())
    }
}

/// An ordered left-ventricle contour.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    pub points: Vec<Vec2>,
    pub landmarks: Landmarks,
    /// Millimetres per normalized unit, `[sy, sx]`.
    pub spacing_mm: [f64; 2],
    pub view: View,
    pub frame: Frame,
}

impl Contour {
    /// Builds a contour without any validation. Sampled contours go through
    /// here so that self-intersections can be reported instead of rejected.
    pub fn new_unchecked(
        points: Vec<Vec2>,
        landmarks: Landmarks,
        spacing_mm: [f64; 2],
        view: View,
        frame: Frame,
    ) -> Self {
        Self { points, landmarks, spacing_mm, view, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Vertices of the closed polygon: basal1 through basal2 along the
    /// contour, closed by the straight basal chord.
    pub fn polygon(&self) -> &[Vec2] {
        &self.points[self.landmarks.basal1..=self.landmarks.basal2]
    }

    /// Points converted to millimetres.
    pub fn physical_points(&self) -> Vec<Vec2> {
        let [sy, sx] = self.spacing_mm;
        self.points.iter().map(|p| Vec2::new(p.x * sx, p.y * sy)).collect()
    }

    /// Coordinates flattened as `[x0, y0, x1, y1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn validate(&self) -> std::result::Result<(), ContourError> {
        validate_contour(self.points.clone(), self.landmarks, self.spacing_mm, self.view, self.frame).map(|_| ())
    }

    pub fn is_self_intersecting(&self) -> bool {
        find_self_intersection(self.polygon()).is_some()
    }
}

pub fn validate_contour(
    points: Vec<Vec2>,
    landmarks: Landmarks,
    spacing_mm: [f64; 2],
    view: View,
    frame: Frame,
) -> std::result::Result<Contour, ContourError> {
    let k = points.len();
    if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(ContourError::NonFinite(i));
    }
    if k.is_multiple_of(2) && k > 0 {
        return Err(ContourError::EvenPointCount(k));
    }
    if k < 5 {
        return Err(ContourError::TooFewPoints(k));
    }
    landmarks.check(k)?;
    let contour = Contour::new_unchecked(points, landmarks, spacing_mm, view, frame);
    if let Some((first, second)) = find_self_intersection(contour.polygon()) {
        return Err(ContourError::SelfIntersection { first, second });
    }
    Ok(contour)
}

fn orient(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn within_box(a: &Vec2, b: &Vec2, p: &Vec2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Whether closed segments `ab` and `cd` share at least one point.
pub fn segments_intersect(a: &Vec2, b: &Vec2, c: &Vec2, d: &Vec2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && within_box(c, d, a))
        || (d2 == 0.0 && within_box(c, d, b))
        || (d3 == 0.0 && within_box(a, b, c))
        || (d4 == 0.0 && within_box(a, b, d))
}

/// First pair of ring segments (segment `i` joins vertex `i` to `i+1`, the
/// last one closes the ring) that intersect improperly.
pub fn find_self_intersection(poly: &[Vec2]) -> Option<(usize, usize)> {
    let n = poly.len();
    if n < 3 {
        return None;
    }
    let seg = |i: usize| (&poly[i], &poly[(i + 1) % n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = seg(i);
            let (c, d) = seg(j);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Neighbours share a vertex; only a fold back onto each other counts.
                let (shared, p, q) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                let u = p - shared;
                let v = q - shared;
                let collinear = orient(shared, p, q) == 0.0;
                if collinear && u.dot(&v) > 0.0 {
                    return Some((i, j));
                }
                continue;
            }
            if segments_intersect(a, b, c, d) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Signed shoelace area of a closed polygon (positive when counter-clockwise
/// in a y-up frame).
pub fn signed_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let p = &poly[i];
        let q = &poly[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    0.5 * acc
}

pub fn shoelace_area(poly: &[Vec2]) -> f64 {
    signed_area(poly).abs()
}

/// Binary foreground map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl SegmentationMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("mask dimensions must be positive".into()));
        }
        if data.len() != height * width {
            return Err(Error::Dimension(format!("mask data has {} entries, expected {}", data.len(), height * width)));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Binary masks always carry two classes: background and left ventricle.
    pub fn class_count(&self) -> usize {
        2
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn same_shape(&self, other: &SegmentationMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Normalized coordinate of the center of pixel `index` along an axis with
/// `n` pixels.
pub fn pixel_center(index: usize, n: usize) -> f64 {
    (2.0 * index as f64 + 1.0 - n as f64) / n as f64
}

/// Rasterized polygon plus a flag for zero-area input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub mask: SegmentationMask,
    pub degenerate: bool,
}

const DEGENERATE_AREA: f64 = 1e-14;

/// Even-odd fill of a closed polygon sampled at pixel centers; centers lying
/// exactly on an edge count as inside.
pub fn rasterize_polygon(poly: &[Vec2], height: usize, width: usize) -> Result<Raster> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("raster dimensions must be positive".into()));
    }
    let mut mask = SegmentationMask::empty(height, width);
    if poly.len() < 3 || shoelace_area(poly) <= DEGENERATE_AREA {
        log::warn!("degenerate polygon rasterized to an empty mask");
        return Ok(Raster { mask, degenerate: true });
    }
    let n = poly.len();
    let w = width as f64;
    // Column index whose center is at x, as a real number.
    let col_of = |x: f64| (x * w + w - 1.0) / 2.0;
    let mut crossings: Vec<f64> = Vec::with_capacity(n);
    for row in 0..height {
        let yc = pixel_center(row, height);
        crossings.clear();
        for e in 0..n {
            let p = &poly[e];
            let q = &poly[(e + 1) % n];
            if (p.y > yc) != (q.y > yc) {
                crossings.push(p.x + (yc - p.y) * (q.x - p.x) / (q.y - p.y));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        for pair in crossings.chunks_exact(2) {
            let lo = col_of(pair[0]).ceil().max(0.0);
            let hi = col_of(pair[1]).floor().min(w - 1.0);
            if lo > hi {
                continue;
            }
            for col in lo as usize..=hi as usize {
                mask.set(row, col, true);
            }
        }
        // Centers sitting exactly on an edge.
        for e in 0..n {
            let p = &poly[e];
            let q = &poly[(e + 1) % n];
            if yc < p.y.min(q.y) || yc > p.y.max(q.y) {
                continue;
            }
            if p.y == q.y {
                let lo = col_of(p.x.min(q.x)).ceil().max(0.0);
                let hi = col_of(p.x.max(q.x)).floor().min(w - 1.0);
                if lo <= hi {
                    for col in lo as usize..=hi as usize {
                        mask.set(row, col, true);
                    }
                }
            } else {
                let x = p.x + (yc - p.y) * (q.x - p.x) / (q.y - p.y);
                let c = col_of(x);
                let r = c.round();
                if (c - r).abs() < 1e-9 && r >= 0.0 && r < w {
                    mask.set(row, r as usize, true);
                }
            }
        }
    }
    Ok(Raster { mask, degenerate: false })
}

pub fn rasterize_contour(contour: &Contour, height: usize, width: usize) -> Result<Raster> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!("raster must be at least 8x8, got {height}x{width}")));
    }
    rasterize_polygon(contour.polygon(), height, width)
}

/// `2|A∩B| / (|A|+|B|)`, defined as 1 when both masks are empty.
pub fn dice(a: &SegmentationMask, b: &SegmentationMask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "mask shapes {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}
