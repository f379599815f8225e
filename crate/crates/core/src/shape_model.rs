//! PCA point-distribution model and the posterior shape model.
//!
//! Shapes are flattened as `[x0, y0, x1, y1, ...]`: `2K` entries for a single
//! frame, `4K` for a joint ED/ES model (ED points first, then ES). The model
//! stores `Q = U Λ^{1/2}` so that `s(α) = mean + Q α` with `α ~ N(0, I)`
//! reproduces the training covariance.
//!
//! Conditioning on a subset `g` of points follows
//!
//! ```text
//! M   = Q_gᵀ Q_g + ε² I_r
//! μ_c = mean + Q M⁻¹ Q_gᵀ (s_g − mean_g)
//! Σ_c = ε² Q M⁻¹ Qᵀ
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::PointGaussian;
use crate::linalg::{self, Mat2, Vec2};

/// Eigenvalues below this fraction of the largest are dropped from `Q`.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Slack used when the caller does not provide one.
pub const DEFAULT_EPSILON2: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Single,
    Joint,
}

impl ModelKind {
    /// Number of contours concatenated in one shape vector.
    pub fn frames(self) -> usize {
        match self {
            ModelKind::Single => 1,
            ModelKind::Joint => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    pub mean: DVector<f64>,
    /// `D x r` factor matrix.
    pub factors: DMatrix<f64>,
    /// Descending, length `r`.
    pub eigenvalues: DVector<f64>,
    pub kind: ModelKind,
    /// Points per contour.
    pub k: usize,
}

impl ShapeModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.factors.ncols()
    }

    /// Number of 2D points in a shape vector.
    pub fn points(&self) -> usize {
        self.dim() / 2
    }

    /// Model covariance `Q Qᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factors * self.factors.transpose()
    }

    /// Builds a model from a mean and a (symmetric PSD) covariance.
    pub fn from_covariance(mean: DVector<f64>, covariance: &DMatrix<f64>, kind: ModelKind, k: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Dimension(format!(
                "covariance is {}x{}, mean has {d} entries",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if d != 2 * k * kind.frames() {
            return Err(Error::Dimension(format!("dimension {d} does not match K = {k} for a {kind:?} model")));
        }
        let (values, vectors) = linalg::sorted_symmetric_eigen(covariance);
        let lambda_max = values.iter().cloned().fold(0.0, f64::max);
        let rank =
            if lambda_max > 0.0 { values.iter().take_while(|&&v| v > RANK_TOLERANCE * lambda_max).count() } else { 0 };
        let eigenvalues = values.rows(0, rank).into_owned();
        let mut factors = vectors.columns(0, rank).into_owned();
        for (c, &v) in eigenvalues.iter().enumerate() {
            factors.column_mut(c).scale_mut(v.sqrt());
        }
        Ok(Self { mean, factors, eigenvalues, kind, k })
    }

    /// Model restricted to the points `first..first + count` of the shape
    /// vector. The factors are the corresponding rows of `Q`, so the PSM over
    /// the sub-model is the marginal of the full model; the eigenvalue field
    /// carries the parent's spectrum.
    pub fn point_block(&self, first: usize, count: usize) -> Result<ShapeModel> {
        if first + count > self.points() || count == 0 {
            return Err(Error::Dimension(format!(
                "points {first}..{} outside a {}-point model",
                first + count,
                self.points()
            )));
        }
        let kind = if count == self.k { ModelKind::Single } else { self.kind };
        Ok(ShapeModel {
            mean: self.mean.rows(2 * first, 2 * count).into_owned(),
            factors: self.factors.rows(2 * first, 2 * count).into_owned(),
            eigenvalues: self.eigenvalues.clone(),
            kind,
            k: self.k,
        })
    }

    /// Same factors, different mean.
    pub fn with_mean(&self, mean: DVector<f64>) -> Result<ShapeModel> {
        if mean.len() != self.dim() {
            return Err(Error::Dimension(format!("mean has {} entries, model {}", mean.len(), self.dim())));
        }
        Ok(ShapeModel { mean, ..self.clone() })
    }

    /// Mean and marginal covariance of point `index` under the model itself.
    pub fn point_prior(&self, index: usize) -> Result<PointGaussian> {
        if index >= self.points() {
            return Err(Error::InvalidArgument(format!("point {index} out of range")));
        }
        let q = self.factors.rows(2 * index, 2);
        let c = q * q.transpose();
        Ok(PointGaussian::new(
            Vec2::new(self.mean[2 * index], self.mean[2 * index + 1]),
            Mat2::new(c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]),
        ))
    }
}

fn check_shapes(shapes: &[DVector<f64>]) -> Result<usize> {
    if shapes.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 shapes, got {}", shapes.len())));
    }
    let d = shapes[0].len();
    if let Some(i) = shapes.iter().position(|s| s.len() != d) {
        return Err(Error::Dimension(format!("shape {i} has {} entries, expected {d}", shapes[i].len())));
    }
    if shapes.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("training shape".into()));
    }
    Ok(d)
}

/// Population scatter `(1/N) Σ (s - center)(s - center)ᵀ`.
fn scatter(shapes: &[DVector<f64>], center: &DVector<f64>) -> DMatrix<f64> {
    let d = center.len();
    let n = shapes.len();
    let mut centered = DMatrix::zeros(d, n);
    for (c, s) in shapes.iter().enumerate() {
        centered.set_column(c, &(s - center));
    }
    linalg::symmetrize(&(&centered * centered.transpose() / n as f64))
}

fn points_per_contour(d: usize, kind: ModelKind) -> Result<usize> {
    let per = 2 * kind.frames();
    if d == 0 || !d.is_multiple_of(per) {
        return Err(Error::Dimension(format!("dimension {d} is not a multiple of {per} for a {kind:?} model")));
    }
    Ok(d / per)
}

/// Fits mean and principal factors with the population (1/N) covariance.
pub fn fit_pca(shapes: &[DVector<f64>], kind: ModelKind) -> Result<ShapeModel> {
    let d = check_shapes(shapes)?;
    let k = points_per_contour(d, kind)?;
    let n = shapes.len() as f64;
    let mean = shapes.iter().fold(DVector::zeros(d), |acc, s| acc + s) / n;
    let cov = scatter(shapes, &mean);
    ShapeModel::from_covariance(mean, &cov, kind, k)
}

/// Re-expresses the training variation around `mu_hat` instead of the
/// training mean, i.e. eigendecomposes `(1/N) Σ (s - μ̂)(s - μ̂)ᵀ`.
pub fn recenter(model: &ShapeModel, shapes: &[DVector<f64>], mu_hat: &DVector<f64>) -> Result<ShapeModel> {
    let d = check_shapes(shapes)?;
    if mu_hat.len() != d || d != model.dim() {
        return Err(Error::Dimension(format!("model dim {}, shapes {d}, mu_hat {}", model.dim(), mu_hat.len())));
    }
    let cov = scatter(shapes, mu_hat);
    ShapeModel::from_covariance(mu_hat.clone(), &cov, model.kind, model.k)
}

/// Recentering without the training set, via
/// `(1/N) Σ (s - μ̂)(s - μ̂)ᵀ = Q Qᵀ + δ δᵀ` with `δ = mean - μ̂`.
/// Exact whenever the stored factors are full rank.
pub fn recenter_from_model(model: &ShapeModel, mu_hat: &DVector<f64>) -> Result<ShapeModel> {
    if mu_hat.len() != model.dim() {
        return Err(Error::Dimension(format!("mu_hat has {} entries, model {}", mu_hat.len(), model.dim())));
    }
    let delta = &model.mean - mu_hat;
    let cov = model.covariance() + &delta * delta.transpose();
    ShapeModel::from_covariance(mu_hat.clone(), &cov, model.kind, model.k)
}

/// Conditional Gaussian over the full shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalShapeDistribution {
    pub mu_c: DVector<f64>,
    pub sigma_c: DMatrix<f64>,
    pub observed_indices: Vec<usize>,
    pub epsilon2: f64,
}

impl ConditionalShapeDistribution {
    /// 2-subvector of `μ_c` and 2x2 diagonal block of `Σ_c` for point `k`.
    pub fn marginal_2x2(&self, k: usize) -> Result<PointGaussian> {
        if 2 * k + 1 >= self.mu_c.len() {
            return Err(Error::InvalidArgument(format!("point {k} out of range for dimension {}", self.mu_c.len())));
        }
        let r = 2 * k;
        Ok(PointGaussian::new(
            Vec2::new(self.mu_c[r], self.mu_c[r + 1]),
            Mat2::new(
                self.sigma_c[(r, r)],
                self.sigma_c[(r, r + 1)],
                self.sigma_c[(r + 1, r)],
                self.sigma_c[(r + 1, r + 1)],
            ),
        ))
    }

    pub fn points(&self) -> usize {
        self.mu_c.len() / 2
    }
}

/// The solved conditioning system, reusable for any set of query points.
#[derive(Debug, Clone)]
pub struct PosteriorSolve<'a> {
    model: &'a ShapeModel,
    /// `M⁻¹ Q_gᵀ (s_g − mean_g)`, length `r`.
    alpha: DVector<f64>,
    /// `M⁻¹`, `r x r`.
    m_inv: DMatrix<f64>,
    epsilon2: f64,
    observed: Vec<usize>,
}

impl<'a> PosteriorSolve<'a> {
    pub fn new(model: &'a ShapeModel, partial: &[Vec2], observed_indices: &[usize], epsilon2: f64) -> Result<Self> {
        if !(epsilon2 > 0.0) || !epsilon2.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon2 must be > 0, got {epsilon2}")));
        }
        if partial.len() != observed_indices.len() {
            return Err(Error::Dimension(format!(
                "{} observed values for {} indices",
                partial.len(),
                observed_indices.len()
            )));
        }
        if observed_indices.is_empty() {
            return Err(Error::InvalidArgument("no observed points".into()));
        }
        let npts = model.points();
        // Sorted so that the result does not depend on the caller's ordering.
        let mut pairs: Vec<(usize, Vec2)> = observed_indices.iter().copied().zip(partial.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidArgument(format!("duplicate observed index {}", w[0].0)));
            }
        }
        if let Some(&(bad, _)) = pairs.iter().find(|p| p.0 >= npts) {
            return Err(Error::InvalidArgument(format!("observed index {bad} out of range for {npts} points")));
        }
        if pairs.iter().any(|p| !p.1.x.is_finite() || !p.1.y.is_finite()) {
            return Err(Error::NonFinite("observed point".into()));
        }
        let r = model.rank();
        let q = pairs.len();
        let mut q_g = DMatrix::zeros(2 * q, r);
        let mut innovation = DVector::zeros(2 * q);
        for (row, (idx, value)) in pairs.iter().enumerate() {
            for axis in 0..2 {
                q_g.set_row(2 * row + axis, &model.factors.row(2 * idx + axis));
                innovation[2 * row + axis] = value[axis] - model.mean[2 * idx + axis];
            }
        }
        let mut m = q_g.transpose() * &q_g;
        for i in 0..r {
            m[(i, i)] += epsilon2;
        }
        let m_inv = if r == 0 { DMatrix::zeros(0, 0) } else { linalg::spd_inverse(&m)? };
        let alpha = &m_inv * (q_g.transpose() * innovation);
        Ok(Self { model, alpha, m_inv, epsilon2, observed: pairs.into_iter().map(|p| p.0).collect() })
    }

    /// Conditional marginal of point `k`.
    pub fn marginal(&self, k: usize) -> Result<PointGaussian> {
        if k >= self.model.points() {
            return Err(Error::InvalidArgument(format!("point {k} out of range")));
        }
        let q_k = self.model.factors.rows(2 * k, 2);
        let mean = q_k * &self.alpha;
        let cov = (q_k * &self.m_inv * q_k.transpose()) * self.epsilon2;
        let sigma = linalg::symmetrize2(&Mat2::new(cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]));
        Ok(PointGaussian::new(Vec2::new(self.model.mean[2 * k] + mean[0], self.model.mean[2 * k + 1] + mean[1]), sigma))
    }

    pub fn full(&self) -> ConditionalShapeDistribution {
        let q = &self.model.factors;
        let mu_c = &self.model.mean + q * &self.alpha;
        let sigma_c = linalg::symmetrize(&(q * &self.m_inv * q.transpose() * self.epsilon2));
        ConditionalShapeDistribution { mu_c, sigma_c, observed_indices: self.observed.clone(), epsilon2: self.epsilon2 }
    }
}

/// Posterior shape model given observed point coordinates.
pub fn posterior(
    model: &ShapeModel,
    partial: &[Vec2],
    observed_indices: &[usize],
    epsilon2: f64,
) -> Result<ConditionalShapeDistribution> {
    Ok(PosteriorSolve::new(model, partial, observed_indices, epsilon2)?.full())
}

pub fn marginal_2x2(dist: &ConditionalShapeDistribution, k: usize) -> Result<PointGaussian> {
    dist.marginal_2x2(k)
}
