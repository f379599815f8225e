//! Per-point Gaussian parameters from probability heatmaps.
//!
//! A heatmap `Z` is normalized to sum to one and treated as a density over
//! pixel-center coordinates. Column coordinates use the map
//! `I[i][j] = (2j - (W+1)) / W` and row coordinates `J[i][j] = (2i - (H+1)) / H`
//! with 1-based `i, j`; the mean is `(<Z, I>, <Z, J>)` and the covariance the
//! matching centered second moments.

use crate::error::{Error, Result};
use crate::geometry::{Contour, Frame, Landmarks, View};
use crate::linalg::{self, Mat2, Vec2};

/// One `H x W` grid, row-major, always `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("heatmap dimensions must be positive".into()));
        }
        if data.len() != height * width {
            return Err(Error::Dimension(format!("heatmap has {} values, expected {}", data.len(), height * width)));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mirror image across the vertical axis (columns reversed).
    pub fn flip_columns(&self) -> Self {
        Self::from_fn(self.height, self.width, |i, j| self.get(i, self.width - 1 - j))
    }

    fn check_normalized(&self, index: usize) -> Result<()> {
        if self.data.iter().any(|&v| v < 0.0 || !v.is_finite()) || (self.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized { index });
        }
        Ok(())
    }
}

/// `K` per-point heatmaps sharing one grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    maps: Vec<Heatmap>,
    normalized: bool,
}

impl HeatmapStack {
    pub fn new(maps: Vec<Heatmap>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Empty("empty stack".into()));
        }
        let (h, w) = (maps[0].height, maps[0].width);
        if maps.iter().any(|m| m.height != h || m.width != w) {
            return Err(Error::Dimension("heatmaps in a stack must share H x W".into()));
        }
        Ok(Self { maps, normalized: false })
    }

    pub fn maps(&self) -> &[Heatmap] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn height(&self) -> usize {
        self.maps[0].height
    }

    pub fn width(&self) -> usize {
        self.maps[0].width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// A 2D Gaussian for one contour point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointGaussian {
    pub mu: Vec2,
    pub sigma: Mat2,
}

impl PointGaussian {
    pub fn new(mu: Vec2, sigma: Mat2) -> Self {
        Self { mu, sigma }
    }

    pub fn isotropic(mu: Vec2, variance: f64) -> Self {
        Self::new(mu, Mat2::identity() * variance)
    }
}

/// Predicted per-point Gaussians for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourDistribution {
    pub points: Vec<PointGaussian>,
    pub landmarks: Landmarks,
    pub view: View,
    pub frame: Frame,
    pub spacing_mm: [f64; 2],
}

impl ContourDistribution {
    pub fn new(
        points: Vec<PointGaussian>,
        landmarks: Landmarks,
        view: View,
        frame: Frame,
        spacing_mm: [f64; 2],
    ) -> Result<Self> {
        let k = points.len();
        if k < 5 {
            return Err(crate::error::ContourError::TooFewPoints(k).into());
        }
        if k.is_multiple_of(2) {
            return Err(crate::error::ContourError::EvenPointCount(k).into());
        }
        landmarks.check(k)?;
        Ok(Self { points, landmarks, view, frame, spacing_mm })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flattened means `[x0, y0, x1, y1, ...]`.
    pub fn mean_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|g| [g.mu.x, g.mu.y]).collect()
    }

    /// The mean prediction as a contour.
    pub fn mean_contour(&self) -> Contour {
        Contour::new_unchecked(
            self.points.iter().map(|g| g.mu).collect(),
            self.landmarks,
            self.spacing_mm,
            self.view,
            self.frame,
        )
    }
}

/// Column and row coordinate maps for an `H x W` grid.
pub fn coordinate_maps(height: usize, width: usize) -> Result<(Heatmap, Heatmap)> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
    }
    let (h, w) = (height as f64, width as f64);
    let i_map = Heatmap::from_fn(height, width, |_, j| (2.0 * (j + 1) as f64 - (w + 1.0)) / w);
    let j_map = Heatmap::from_fn(height, width, |i, _| (2.0 * (i + 1) as f64 - (h + 1.0)) / h);
    Ok((i_map, j_map))
}

fn coord(index: usize, n: usize) -> f64 {
    (2.0 * (index + 1) as f64 - (n as f64 + 1.0)) / n as f64
}

/// Clamps negatives to zero and divides each grid by its total mass.
pub fn normalize_heatmap(raw: &HeatmapStack) -> Result<HeatmapStack> {
    let mut maps = Vec::with_capacity(raw.len());
    for (index, m) in raw.maps.iter().enumerate() {
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("heatmap {index}")));
        }
        let clamped: Vec<f64> = m.data.iter().map(|&v| v.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroMass { index });
        }
        maps.push(Heatmap { height: m.height, width: m.width, data: clamped.into_iter().map(|v| v / total).collect() });
    }
    Ok(HeatmapStack { maps, normalized: true })
}

/// Expected coordinate under a normalized heatmap.
pub fn heatmap_mean(z: &Heatmap) -> Result<Vec2> {
    z.check_normalized(0)?;
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..z.height {
        let y = coord(i, z.height);
        let row = &z.data[i * z.width..(i + 1) * z.width];
        for (j, &p) in row.iter().enumerate() {
            mx += p * coord(j, z.width);
            my += p * y;
        }
    }
    Ok(Vec2::new(mx, my))
}

/// Centered second moments `[[Var x, Cov], [Cov, Var y]]` about `mu`.
pub fn heatmap_covariance(z: &Heatmap, mu: &Vec2) -> Result<Mat2> {
    z.check_normalized(0)?;
    let (mut vxx, mut vxy, mut vyy) = (0.0, 0.0, 0.0);
    for i in 0..z.height {
        let dy = coord(i, z.height) - mu.y;
        let row = &z.data[i * z.width..(i + 1) * z.width];
        for (j, &p) in row.iter().enumerate() {
            let dx = coord(j, z.width) - mu.x;
            vxx += p * dx * dx;
            vxy += p * dx * dy;
            vyy += p * dy * dy;
        }
    }
    Ok(Mat2::new(vxx, vxy, vxy, vyy))
}

/// Mean and PSD-clamped covariance of one normalized heatmap.
pub fn extract_gaussian(z: &Heatmap) -> Result<PointGaussian> {
    let mu = heatmap_mean(z)?;
    let sigma = linalg::clamp_psd2(&heatmap_covariance(z, &mu)?);
    Ok(PointGaussian::new(mu, sigma))
}

/// Gaussians for every map of a stack, normalizing first when needed.
pub fn extract_stack(stack: &HeatmapStack) -> Result<Vec<PointGaussian>> {
    let normalized;
    let stack = if stack.normalized {
        stack
    } else {
        normalized = normalize_heatmap(stack)?;
        &normalized
    };
    stack
        .maps
        .iter()
        .enumerate()
        .map(|(index, m)| {
            extract_gaussian(m).map_err(|e| match e {
                Error::NotNormalized { .. } => Error::NotNormalized { index },
                other => other,
            })
        })
        .collect()
}

/// Mean per-point Gaussian negative log-likelihood of `target` (constant
/// terms dropped).
pub fn gaussian_nll(dist: &ContourDistribution, target: &Contour) -> Result<f64> {
    if dist.len() != target.len() {
        return Err(Error::Dimension(format!("distribution has {} points, target {}", dist.len(), target.len())));
    }
    let mut total = 0.0;
    for (k, (g, s)) in dist.points.iter().zip(&target.points).enumerate() {
        let sigma = linalg::jittered2(&g.sigma);
        let det = sigma.determinant();
        if !(det > 0.0) {
            return Err(Error::Singular(format!("covariance of point {k}")));
        }
        let inv = linalg::inverse2(&g.sigma)?;
        let r = g.mu - s;
        total += 0.5 * det.ln() + 0.5 * (r.transpose() * inv * r)[(0, 0)];
    }
    Ok(total / dist.len() as f64)
}

/// Gaussian density sampled at pixel centers and normalized to unit mass.
pub fn render_gaussian_heatmap(g: &PointGaussian, height: usize, width: usize) -> Result<Heatmap> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
    }
    let s = linalg::symmetrize2(&g.sigma);
    let det = s.determinant();
    if !(s[(0, 0)] > 0.0 && det > 0.0) {
        return Err(Error::NotPositiveDefinite("rendered covariance".into()));
    }
    let inv = Mat2::new(s[(1, 1)], -s[(0, 1)], -s[(1, 0)], s[(0, 0)]) / det;
    let mut map = Heatmap::from_fn(height, width, |i, j| {
        let d = Vec2::new(coord(j, width) - g.mu.x, coord(i, height) - g.mu.y);
        (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp()
    });
    let total = map.sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMass { index: 0 });
    }
    for v in &mut map.data {
        *v /= total;
    }
    Ok(map)
}
