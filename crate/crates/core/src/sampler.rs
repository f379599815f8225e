//! Gaussian fusion and the landmark-first hierarchical contour sampler.

use crate::error::{Error, Result};
use crate::geometry::{Contour, Frame, Landmarks};
use crate::heatmap::{ContourDistribution, PointGaussian};
use crate::linalg::{self, Vec2};
use crate::rng::RandomStream;
use crate::shape_model::{PosteriorSolve, ShapeModel};

/// RNG path tags below a sample index.
pub const PATH_ED: u64 = 0;
pub const PATH_ES: u64 = 1;
pub const PATH_ORDER: u64 = 2;

pub fn frame_path(frame: Frame) -> u64 {
    match frame {
        Frame::ED => PATH_ED,
        Frame::ES => PATH_ES,
    }
}

/// Product of two 2D Gaussian densities, renormalized.
pub fn fuse_gaussians(pred: &PointGaussian, prior: &PointGaussian) -> Result<PointGaussian> {
    let finite = |g: &PointGaussian| g.mu.iter().all(|v| v.is_finite()) && linalg::is_finite2(&g.sigma);
    if !finite(pred) || !finite(prior) {
        return Err(Error::NonFinite("fusion input".into()));
    }
    let s_inv = linalg::inverse2_guarded(&(pred.sigma + prior.sigma))?;
    let mu = pred.sigma * s_inv * prior.mu + prior.sigma * s_inv * pred.mu;
    let sigma = linalg::symmetrize2(&(pred.sigma * s_inv * prior.sigma));
    Ok(PointGaussian::new(mu, sigma))
}

/// One draw from a 2D Gaussian using the stream's first two normals.
pub fn draw_point(g: &PointGaussian, stream: &RandomStream) -> Vec2 {
    g.mu + linalg::psd_factor2(&g.sigma) * stream.normal2()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingSchedule {
    pub levels: Vec<Vec<usize>>,
}

impl SamplingSchedule {
    pub fn num_points(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }
}

/// Level 0 holds the landmarks; each later level adds the floor-midpoint of
/// every gap between consecutive sampled indices.
pub fn build_schedule(k: usize, landmarks: &Landmarks) -> Result<SamplingSchedule> {
    if k < 5 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("K must be odd and >= 5, got {k}")));
    }
    if *landmarks != Landmarks::canonical(k) {
        return Err(Error::InvalidArgument(format!(
            "unsupported landmark layout {:?} for K = {k}",
            landmarks.as_array()
        )));
    }
    let mut sampled = landmarks.as_array().to_vec();
    let mut levels = vec![sampled.clone()];
    while sampled.len() < k {
        let level: Vec<usize> = sampled.windows(2).filter(|w| w[1] - w[0] >= 2).map(|w| (w[0] + w[1]) / 2).collect();
        sampled.extend_from_slice(&level);
        sampled.sort_unstable();
        levels.push(level);
    }
    Ok(SamplingSchedule { levels })
}

fn check_model(dist_len: usize, model: &ShapeModel) -> Result<()> {
    if model.dim() != 2 * dist_len {
        return Err(Error::Dimension(format!(
            "model dimension {} does not match {} predicted points",
            model.dim(),
            dist_len
        )));
    }
    Ok(())
}

/// Draws one contour. `model` should be recentered on the predicted means.
///
/// Point `k` uses the stream `rng.child(k)`.
pub fn hierarchical_sample(
    dist: &ContourDistribution,
    model: &ShapeModel,
    epsilon2: f64,
    rng: &RandomStream,
) -> Result<Contour> {
    let schedule = build_schedule(dist.len(), &dist.landmarks)?;
    hierarchical_sample_with(dist, model, epsilon2, rng, &schedule)
}

/// As [`hierarchical_sample`] with a precomputed schedule.
pub fn hierarchical_sample_with(
    dist: &ContourDistribution,
    model: &ShapeModel,
    epsilon2: f64,
    rng: &RandomStream,
    schedule: &SamplingSchedule,
) -> Result<Contour> {
    check_model(dist.len(), model)?;
    sample_levels(dist, model, 0, &[], &[], epsilon2, rng, schedule)
}

/// Hierarchical pass for a contour stored at model points `offset..offset+K`,
/// with the model points `fixed` already observed at `fixed_values`.
#[allow(clippy::too_many_arguments)]
fn sample_levels(
    dist: &ContourDistribution,
    model: &ShapeModel,
    offset: usize,
    fixed: &[usize],
    fixed_values: &[Vec2],
    epsilon2: f64,
    rng: &RandomStream,
    schedule: &SamplingSchedule,
) -> Result<Contour> {
    if schedule.num_points() != dist.len() {
        return Err(Error::Dimension("schedule does not cover the contour".into()));
    }
    let mut points = vec![Vec2::zeros(); dist.len()];
    let mut observed: Vec<usize> = fixed.to_vec();
    let mut values: Vec<Vec2> = fixed_values.to_vec();

    for &k in &schedule.levels[0] {
        points[k] = draw_point(&dist.points[k], &rng.child(k as u64));
    }
    observed.extend(schedule.levels[0].iter().map(|&k| offset + k));
    values.extend(schedule.levels[0].iter().map(|&k| points[k]));

    for level in &schedule.levels[1..] {
        let solve = PosteriorSolve::new(model, &values, &observed, epsilon2)?;
        for &k in level {
            let prior = solve.marginal(offset + k)?;
            let fused = fuse_gaussians(&dist.points[k], &prior)?;
            points[k] = draw_point(&fused, &rng.child(k as u64));
        }
        observed.extend(level.iter().map(|&k| offset + k));
        values.extend(level.iter().map(|&k| points[k]));
    }
    Ok(Contour::new_unchecked(points, dist.landmarks, dist.spacing_mm, dist.view, dist.frame))
}

fn check_pair(ed: &ContourDistribution, es: &ContourDistribution) -> Result<()> {
    if ed.len() != es.len() || ed.landmarks != es.landmarks {
        return Err(Error::Dimension(format!("ED has {} points, ES has {}", ed.len(), es.len())));
    }
    if ed.frame != Frame::ED || es.frame != Frame::ES {
        return Err(Error::InvalidArgument("expected an ED and an ES prediction".into()));
    }
    Ok(())
}

/// Temporally consistent ED/ES draw.
///
/// `joint_model` is the 4K joint model recentered on `[μ̂_ED ; μ̂_ES]`. A coin on
/// `rng.child(PATH_ORDER)` picks the first frame, which is sampled
/// hierarchically on its block of the joint model. The joint posterior given
/// that whole contour is fused point-wise with the other frame's prediction,
/// and the second frame is sampled hierarchically from the fused marginals,
/// each level conditioning the joint model on the first contour and on the
/// second-frame points drawn so far.
pub fn temporal_sample(
    ed: &ContourDistribution,
    es: &ContourDistribution,
    joint_model: &ShapeModel,
    epsilon2: f64,
    rng: &RandomStream,
) -> Result<(Contour, Contour)> {
    check_pair(ed, es)?;
    let k = ed.len();
    if joint_model.dim() != 4 * k {
        return Err(Error::Dimension(format!(
            "joint model dimension {} does not match 4K = {}",
            joint_model.dim(),
            4 * k
        )));
    }
    let schedule = build_schedule(k, &ed.landmarks)?;
    let es_first = rng.child(PATH_ORDER).coin();
    let (first, second) = if es_first { (es, ed) } else { (ed, es) };
    let offset = |f: Frame| if f == Frame::ED { 0 } else { k };

    let first_model = joint_model.point_block(offset(first.frame), k)?;
    let first_contour =
        hierarchical_sample_with(first, &first_model, epsilon2, &rng.child(frame_path(first.frame)), &schedule)?;

    let first_idx: Vec<usize> = (0..k).map(|i| offset(first.frame) + i).collect();
    let solve = PosteriorSolve::new(joint_model, &first_contour.points, &first_idx, epsilon2)?;
    let mut fused = Vec::with_capacity(k);
    for i in 0..k {
        let prior = solve.marginal(offset(second.frame) + i)?;
        fused.push(fuse_gaussians(&second.points[i], &prior)?);
    }
    let fused_dist = ContourDistribution { points: fused, ..second.clone() };
    let second_contour = sample_levels(
        &fused_dist,
        joint_model,
        offset(second.frame),
        &first_idx,
        &first_contour.points,
        epsilon2,
        &rng.child(frame_path(second.frame)),
        &schedule,
    )?;

    Ok(if es_first { (second_contour, first_contour) } else { (first_contour, second_contour) })
}

/// ED and ES drawn independently on their own single-frame models, using the
/// same RNG paths as [`temporal_sample`].
pub fn independent_pair_sample(
    ed: &ContourDistribution,
    es: &ContourDistribution,
    ed_model: &ShapeModel,
    es_model: &ShapeModel,
    epsilon2: f64,
    rng: &RandomStream,
) -> Result<(Contour, Contour)> {
    check_pair(ed, es)?;
    let a = hierarchical_sample(ed, ed_model, epsilon2, &rng.child(PATH_ED))?;
    let b = hierarchical_sample(es, es_model, epsilon2, &rng.child(PATH_ES))?;
    Ok((a, b))
}
