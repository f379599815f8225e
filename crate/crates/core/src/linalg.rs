//! Small dense helpers shared by the Gaussian code paths.
//!
//! Every matrix inversion in the crate goes through [`jittered`] first, which
//! adds `1e-9 * trace / n + 1e-12` to the diagonal.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Diagonal loading applied before any inversion.
pub fn jitter_amount(trace: f64, n: usize) -> f64 {
    1e-9 * trace.abs() / n.max(1) as f64 + 1e-12
}

pub fn jittered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let lambda = jitter_amount(m.trace(), n);
    let mut out = m.clone();
    for i in 0..n {
        out[(i, i)] += lambda;
    }
    out
}

pub fn jittered2(m: &Mat2) -> Mat2 {
    let lambda = jitter_amount(m.trace(), 2);
    m + Mat2::identity() * lambda
}

/// Inverse of a 2x2 matrix after jitter.
pub fn inverse2(m: &Mat2) -> Result<Mat2> {
    let j = jittered2(m);
    let det = j.determinant();
    if !det.is_finite() || det.abs() < f64::MIN_POSITIVE {
        return Err(Error::Singular(format!("2x2 determinant {det}")));
    }
    Ok(Mat2::new(j[(1, 1)], -j[(0, 1)], -j[(1, 0)], j[(0, 0)]) / det)
}

/// Inverse of a 2x2 matrix, loading the diagonal only when the reciprocal
/// condition number falls below `1e-12`.
pub fn inverse2_guarded(m: &Mat2) -> Result<Mat2> {
    let det = m.determinant();
    let scale = m.abs().max();
    if det.is_finite() && scale > 0.0 && det.abs() > 1e-12 * scale * scale {
        return Ok(Mat2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det);
    }
    inverse2(m)
}

pub fn symmetrize2(m: &Mat2) -> Mat2 {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes and clamps negative eigenvalues to zero.
pub fn clamp_psd2(m: &Mat2) -> Mat2 {
    let s = symmetrize2(m);
    let eig = s.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return s;
    }
    let d = Mat2::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)));
    symmetrize2(&(eig.eigenvectors * d * eig.eigenvectors.transpose()))
}

/// Lower-triangular factor `L` with `L Lᵀ = m` for a PSD 2x2 matrix.
///
/// Pivots that fall below zero through rounding are clamped, so singular
/// matrices yield a rank-deficient factor instead of an error.
pub fn psd_factor2(m: &Mat2) -> Mat2 {
    let a = m[(0, 0)].max(0.0);
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let c = m[(1, 1)].max(0.0);
    let l11 = a.sqrt();
    let l21 = if l11 > 0.0 { b / l11 } else { 0.0 };
    let l22 = (c - l21 * l21).max(0.0).sqrt();
    Mat2::new(l11, 0.0, l21, l22)
}

pub fn is_finite2(m: &Mat2) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and each eigenvector's largest-magnitude entry made
/// positive.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Inverse of a symmetric positive-definite matrix after jitter.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = jittered(m)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{}x{} matrix", m.nrows(), m.ncols())))?;
    Ok(symmetrize(&chol.inverse()))
}
