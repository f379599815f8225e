//! Synthetic left-ventricle populations with known noise covariances.
//!
//! The base contour is a half-ellipse closed by a flat basal chord at
//! `y = basal_y`, with the apex toward negative `y` (the top of the image).
//! Per-case shapes add smooth Gaussian perturbations whose correlation over
//! arc length is squared-exponential. ES shapes are contractions of the ED
//! shape toward the basal midpoint.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Contour, Frame, Landmarks, View};
use crate::heatmap::{ContourDistribution, PointGaussian};
use crate::linalg::{self, Vec2};
use crate::rng::RandomStream;

const TAG_TRAIN: u64 = 0;
const TAG_CASE: u64 = 1;
const TAG_BIAS: u64 = 2;
const TAG_EPISTEMIC: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Training shapes per view.
    pub n_train: usize,
    /// Evaluation cases (each has both views and both frames).
    pub n_cases: usize,
    pub k: usize,
    /// Half of the basal chord length.
    pub half_width: f64,
    /// Basal chord to apex distance.
    pub depth: f64,
    pub basal_y: f64,
    /// Per-coordinate standard deviation of the ED shape perturbation.
    pub shape_noise: f64,
    /// Correlation length as a fraction of contour length.
    pub correlation_length: f64,
    /// Linear ES scale factor toward the basal midpoint.
    pub es_contraction: f64,
    /// Share of the ED perturbation carried into ES, in [0, 1].
    pub ed_es_coupling: f64,
    /// Extra independent ES noise.
    pub es_noise: f64,
    /// Per-coordinate standard deviation of the prediction error.
    pub bias_scale: f64,
    pub bias_correlation_length: f64,
    /// Number of perturbed prediction sets standing in for weight draws.
    pub n_epistemic: usize,
    pub epistemic_scale: f64,
    /// Millimetres per normalized unit, `[sy, sx]`.
    pub spacing_mm: [f64; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_cases: 100,
            k: 21,
            half_width: 0.35,
            depth: 0.7,
            basal_y: 0.35,
            shape_noise: 0.03,
            correlation_length: 0.2,
            es_contraction: 0.75,
            ed_es_coupling: 0.9,
            es_noise: 0.01,
            bias_scale: 0.02,
            bias_correlation_length: 0.2,
            n_epistemic: 3,
            epistemic_scale: 0.01,
            spacing_mm: [110.0, 110.0],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k < 5 || self.k.is_multiple_of(2) {
            return bad(format!("k must be odd and >= 5, got {}", self.k));
        }
        if self.n_train < 2 {
            return bad("n_train must be at least 2".into());
        }
        for (name, v) in [
            ("half_width", self.half_width),
            ("depth", self.depth),
            ("correlation_length", self.correlation_length),
            ("bias_correlation_length", self.bias_correlation_length),
            ("spacing_mm[0]", self.spacing_mm[0]),
            ("spacing_mm[1]", self.spacing_mm[1]),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("shape_noise", self.shape_noise),
            ("es_noise", self.es_noise),
            ("bias_scale", self.bias_scale),
            ("epistemic_scale", self.epistemic_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.es_contraction > 0.0 && self.es_contraction <= 1.0) {
            return bad(format!("es_contraction must be in (0, 1], got {}", self.es_contraction));
        }
        if !(0.0..=1.0).contains(&self.ed_es_coupling) {
            return bad(format!("ed_es_coupling must be in [0, 1], got {}", self.ed_es_coupling));
        }
        Ok(())
    }
}

/// Points along the half-ellipse, uniform in arc length, from basal1
/// through the apex to basal2.
pub fn base_contour(k: usize, half_width: f64, depth: f64, basal_y: f64) -> Vec<Vec2> {
    let dense = 20_000;
    let at = |t: f64| Vec2::new(-half_width * t.cos(), basal_y - depth * t.sin());
    let mut cumulative = Vec::with_capacity(dense + 1);
    cumulative.push(0.0);
    for i in 1..=dense {
        let t0 = std::f64::consts::PI * (i - 1) as f64 / dense as f64;
        let t1 = std::f64::consts::PI * i as f64 / dense as f64;
        cumulative.push(cumulative[i - 1] + (at(t1) - at(t0)).norm());
    }
    let total = cumulative[dense];
    (0..k)
        .map(|j| {
            if j == 0 {
                return at(0.0);
            }
            if j == k - 1 {
                return at(std::f64::consts::PI);
            }
            if 2 * j == k - 1 {
                return at(std::f64::consts::FRAC_PI_2);
            }
            let target = total * j as f64 / (k - 1) as f64;
            let i = cumulative.partition_point(|&c| c < target).clamp(1, dense);
            let frac = (target - cumulative[i - 1]) / (cumulative[i] - cumulative[i - 1]);
            let t = std::f64::consts::PI * ((i - 1) as f64 + frac) / dense as f64;
            at(t)
        })
        .collect()
}

/// Squared-exponential correlation over normalized arc length `i / (K-1)`.
pub fn se_correlation(k: usize, length: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| {
        let d = (i as f64 - j as f64) / (k - 1) as f64;
        (-0.5 * d * d / (length * length)).exp()
    })
}

/// Covariance of the interleaved `[x0, y0, ...]` vector when x and y are
/// independent with correlation `corr` and standard deviation `scale`.
pub fn interleaved_covariance(corr: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let k = corr.nrows();
    DMatrix::from_fn(2 * k, 2 * k, |a, b| if a % 2 == b % 2 { scale * scale * corr[(a / 2, b / 2)] } else { 0.0 })
}

fn cholesky_factor(corr: &DMatrix<f64>) -> DMatrix<f64> {
    // The SE kernel is numerically rank deficient; a relative floor keeps the
    // factorization well defined without visibly changing it.
    let mut m = corr.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += 1e-10;
    }
    nalgebra::Cholesky::new(m).map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(corr.nrows(), corr.ncols()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub id: String,
    pub view: View,
    pub ed: Contour,
    pub es: Contour,
}

impl SynthCase {
    pub fn contour(&self, frame: Frame) -> &Contour {
        match frame {
            Frame::ED => &self.ed,
            Frame::ES => &self.es,
        }
    }
}

/// A predicted contour distribution with its case id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPrediction {
    pub id: String,
    pub dist: ContourDistribution,
}

#[derive(Debug, Clone)]
pub struct SynthPredictions {
    /// One prediction per case, view and frame.
    pub base: Vec<LabeledPrediction>,
    /// `n_epistemic` perturbed copies of `base`.
    pub epistemic: Vec<Vec<LabeledPrediction>>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: SynthConfig,
    base: Vec<Vec2>,
    shape_chol: DMatrix<f64>,
    bias_chol: DMatrix<f64>,
    root: RandomStream,
}

pub const VIEWS: [View; 2] = [View::A4C, View::A2C];

fn view_index(view: View) -> u64 {
    match view {
        View::A4C => 0,
        View::A2C => 1,
    }
}

impl Generator {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            base: base_contour(cfg.k, cfg.half_width, cfg.depth, cfg.basal_y),
            shape_chol: cholesky_factor(&se_correlation(cfg.k, cfg.correlation_length)),
            bias_chol: cholesky_factor(&se_correlation(cfg.k, cfg.bias_correlation_length)),
            root: RandomStream::new(cfg.seed),
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn base(&self) -> &[Vec2] {
        &self.base
    }

    /// Generating covariance of ED shapes (interleaved layout).
    pub fn ed_covariance(&self) -> DMatrix<f64> {
        interleaved_covariance(&se_correlation(self.cfg.k, self.cfg.correlation_length), self.cfg.shape_noise)
    }

    /// Generating covariance of the prediction error, and so the true joint
    /// covariance behind each predicted `Σ̂`.
    pub fn bias_covariance(&self) -> DMatrix<f64> {
        interleaved_covariance(&se_correlation(self.cfg.k, self.cfg.bias_correlation_length), self.cfg.bias_scale)
    }

    fn smooth(&self, chol: &DMatrix<f64>, scale: f64, stream: &RandomStream) -> Vec<Vec2> {
        let k = self.cfg.k;
        if scale == 0.0 {
            return vec![Vec2::zeros(); k];
        }
        let mut rng = stream.rng();
        let mut z = || -> f64 { rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng) };
        let zx = DVector::from_fn(k, |_, _| z());
        let zy = DVector::from_fn(k, |_, _| z());
        let dx = chol * zx * scale;
        let dy = chol * zy * scale;
        (0..k).map(|i| Vec2::new(dx[i], dy[i])).collect()
    }

    fn basal_mid(points: &[Vec2]) -> Vec2 {
        (points[0] + points[points.len() - 1]) * 0.5
    }

    /// ED/ES pair drawn on `stream`.
    pub fn shape_pair(&self, stream: &RandomStream, view: View) -> (Contour, Contour) {
        let c = &self.cfg;
        let d_ed = self.smooth(&self.shape_chol, c.shape_noise, &stream.child(0));
        let d_free = self.smooth(&self.shape_chol, c.shape_noise, &stream.child(1));
        let d_es = self.smooth(&self.shape_chol, c.es_noise, &stream.child(2));
        let ed: Vec<Vec2> = self.base.iter().zip(&d_ed).map(|(b, d)| b + d).collect();
        let coupled = (1.0 - c.ed_es_coupling * c.ed_es_coupling).sqrt();
        let pre: Vec<Vec2> = self
            .base
            .iter()
            .zip(d_ed.iter().zip(&d_free))
            .map(|(b, (a, f))| b + a * c.ed_es_coupling + f * coupled)
            .collect();
        let center = Self::basal_mid(&pre);
        let es: Vec<Vec2> = pre.iter().zip(&d_es).map(|(p, n)| center + (p - center) * c.es_contraction + n).collect();
        let lm = Landmarks::canonical(c.k);
        (
            Contour::new_unchecked(ed, lm, c.spacing_mm, view, Frame::ED),
            Contour::new_unchecked(es, lm, c.spacing_mm, view, Frame::ES),
        )
    }

    fn draw_cases(&self, tag: u64, n: usize, prefix: &str) -> Vec<SynthCase> {
        let mut out = Vec::with_capacity(n * VIEWS.len());
        for i in 0..n {
            for view in VIEWS {
                let stream = self.root.child(tag).child(i as u64).child(view_index(view));
                let (ed, es) = self.shape_pair(&stream, view);
                out.push(SynthCase { id: format!("{prefix}{i:05}"), view, ed, es });
            }
        }
        out
    }

    /// Training population: `n_train` ED/ES pairs per view.
    pub fn population(&self) -> Vec<SynthCase> {
        self.draw_cases(TAG_TRAIN, self.cfg.n_train, "train")
    }

    /// Evaluation cases (ground truth).
    pub fn cases(&self) -> Vec<SynthCase> {
        self.draw_cases(TAG_CASE, self.cfg.n_cases, "case")
    }

    fn case_stream(&self, tag: u64, case_index: usize, view: View, frame: Frame) -> RandomStream {
        let f = match frame {
            Frame::ED => 0,
            Frame::ES => 1,
        };
        self.root.child(tag).child(case_index as u64).child(view_index(view)).child(f)
    }

    /// Predictions `μ̂ = s + b` with `b` drawn from the bias covariance and
    /// `Σ̂ᵏ` its exact 2x2 marginal. `cases` must come from [`Self::cases`]
    /// (two consecutive entries per case index).
    pub fn predictions(&self, cases: &[SynthCase]) -> Result<SynthPredictions> {
        let c = &self.cfg;
        let var = c.bias_scale * c.bias_scale;
        let mut base = Vec::with_capacity(cases.len() * 2);
        let mut epistemic = vec![Vec::with_capacity(cases.len() * 2); c.n_epistemic];
        for (n, case) in cases.iter().enumerate() {
            let index = n / VIEWS.len();
            for frame in [Frame::ED, Frame::ES] {
                let truth = case.contour(frame);
                let bias =
                    self.smooth(&self.bias_chol, c.bias_scale, &self.case_stream(TAG_BIAS, index, case.view, frame));
                let mu: Vec<Vec2> = truth.points.iter().zip(&bias).map(|(s, b)| s + b).collect();
                let make = |mu: &[Vec2]| {
                    ContourDistribution::new(
                        mu.iter().map(|&m| PointGaussian::isotropic(m, var)).collect(),
                        truth.landmarks,
                        case.view,
                        frame,
                        truth.spacing_mm,
                    )
                };
                base.push(LabeledPrediction { id: case.id.clone(), dist: make(&mu)? });
                for (t, set) in epistemic.iter_mut().enumerate() {
                    let stream = self.case_stream(TAG_EPISTEMIC, index, case.view, frame).child(t as u64);
                    let e = self.smooth(&self.shape_chol, c.epistemic_scale, &stream);
                    let shifted: Vec<Vec2> = mu.iter().zip(&e).map(|(m, d)| m + d).collect();
                    set.push(LabeledPrediction { id: case.id.clone(), dist: make(&shifted)? });
                }
            }
        }
        Ok(SynthPredictions { base, epistemic })
    }
}

/// Training population for `cfg`.
pub fn generate_population(cfg: &SynthConfig) -> Result<Vec<SynthCase>> {
    Ok(Generator::new(cfg)?.population())
}

/// Evaluation cases and their predictions for `cfg`.
pub fn generate_predictions(cfg: &SynthConfig) -> Result<(Vec<SynthCase>, SynthPredictions)> {
    let g = Generator::new(cfg)?;
    let cases = g.cases();
    let preds = g.predictions(&cases)?;
    Ok((cases, preds))
}

/// Flattened shape vectors, ED followed by ES when `joint`.
pub fn shape_vectors(cases: &[SynthCase], joint: bool) -> Vec<DVector<f64>> {
    cases
        .iter()
        .map(|c| {
            let mut v = c.ed.to_flat();
            if joint {
                v.extend(c.es.to_flat());
            }
            DVector::from_vec(v)
        })
        .collect()
}

/// Chi-square(2) 95% quantile.
pub const CHI2_2_95: f64 = 5.991464547107979;

/// Whether `x` lies inside the 95% ellipse of `g`.
pub fn inside_95_ellipse(g: &PointGaussian, x: &Vec2) -> Result<bool> {
    let inv = linalg::inverse2(&g.sigma)?;
    let r = x - g.mu;
    Ok((r.transpose() * inv * r)[(0, 0)] <= CHI2_2_95)
}
