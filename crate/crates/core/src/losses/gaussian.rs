//! Strokes as 2-D Gaussians and the closed-form 2-Wasserstein distance
//! between them.
//!
//! The scalar route takes matrix square roots by eigendecomposition; the
//! tensor route used for training relies on the 2x2 identity
//! `tr sqrt(A) = sqrt(tr A + 2 sqrt(det A))` with
//! `A = S2^1/2 S1 S2^1/2`, so `tr A = tr(S1 S2)` and
//! `det A = det S1 det S2`.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::stroke::StrokeParams;

pub type Mat2 = [[f64; 2]; 2];

/// Eigenvalue floor for near-degenerate covariances.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Mean `(x, y)` and covariance `R diag((w/2)^2, (h/2)^2) R^T`.
pub fn stroke_gaussian(s: &StrokeParams) -> Result<([f64; 2], Mat2)> {
    s.validate_geometry()?;
    let (sin, cos) = s.angle().sin_cos();
    let a = (0.5 * s.w).powi(2);
    let b = (0.5 * s.h).powi(2);
    let cov = [
        [a * cos * cos + b * sin * sin, (a - b) * sin * cos],
        [(a - b) * sin * cos, a * sin * sin + b * cos * cos],
    ];
    Ok(([s.x, s.y], cov))
}

/// Eigenvalues (descending) and unit eigenvectors (columns) of a symmetric
/// 2x2 matrix.
pub fn sym_eigen(m: &Mat2) -> ([f64; 2], Mat2) {
    let (a, b, d) = (m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]);
    let mean = 0.5 * (a + d);
    let radius = (0.25 * (a - d).powi(2) + b * b).sqrt();
    let (l1, l2) = (mean + radius, mean - radius);
    let (vx, vy) = if b.abs() > 1e-300 {
        (l1 - d, b)
    } else if a >= d {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let n = (vx * vx + vy * vy).sqrt();
    let (vx, vy) = (vx / n, vy / n);
    ([l1, l2], [[vx, -vy], [vy, vx]])
}

/// Principal square root of a symmetric positive semi-definite 2x2 matrix.
pub fn sym_sqrt(m: &Mat2) -> Mat2 {
    let ([l1, l2], v) = sym_eigen(m);
    let (s1, s2) = (l1.max(EIGEN_FLOOR).sqrt(), l2.max(EIGEN_FLOOR).sqrt());
    let mut out = [[0.0; 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = s1 * v[i][0] * v[j][0] + s2 * v[i][1] * v[j][1];
        }
    }
    out
}

fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Squared 2-Wasserstein distance between Gaussians `(m1, c1)` and
/// `(m2, c2)`.
pub fn wasserstein_gaussians(m1: [f64; 2], c1: &Mat2, m2: [f64; 2], c2: &Mat2) -> f64 {
    let root2 = sym_sqrt(c2);
    let mut inner = mul(&mul(&root2, c1), &root2);
    // Symmetrize against round-off before the second root.
    let off = 0.5 * (inner[0][1] + inner[1][0]);
    inner[0][1] = off;
    inner[1][0] = off;
    let cross = sym_sqrt(&inner);
    let mean = (m1[0] - m2[0]).powi(2) + (m1[1] - m2[1]).powi(2);
    let trace = c1[0][0] + c1[1][1] + c2[0][0] + c2[1][1] - 2.0 * (cross[0][0] + cross[1][1]);
    (mean + trace).max(0.0)
}

/// `D_W` between two strokes.
pub fn gaussian_wasserstein(u: &StrokeParams, v: &StrokeParams) -> Result<f64> {
    let (m1, c1) = stroke_gaussian(u)?;
    let (m2, c2) = stroke_gaussian(v)?;
    Ok(wasserstein_gaussians(m1, &c1, m2, &c2))
}

/// Batched `D_W` over the last axis of two `(..., 8)` parameter tensors.
pub fn wasserstein_tensor(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let cov = |t: &Tensor| -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
        let phi = (t.narrow(D::Minus1, 4, 1)?.squeeze(D::Minus1)? * std::f64::consts::PI)?;
        let (sin, cos) = (phi.sin()?, phi.cos()?);
        let a = (t.narrow(D::Minus1, 3, 1)?.squeeze(D::Minus1)? * 0.5)?.sqr()?;
        let b = (t.narrow(D::Minus1, 2, 1)?.squeeze(D::Minus1)? * 0.5)?.sqr()?;
        let (c2, s2, sc) = (cos.sqr()?, sin.sqr()?, (&sin * &cos)?);
        let xx = ((&a * &c2)? + (&b * &s2)?)?;
        let yy = ((&a * &s2)? + (&b * &c2)?)?;
        let xy = ((&a - &b)? * sc)?;
        let det = (a * b)?;
        Ok((xx, yy, xy, det, t.narrow(D::Minus1, 0, 2)?))
    };
    let (uxx, uyy, uxy, udet, um) = cov(u)?;
    let (vxx, vyy, vxy, vdet, vm) = cov(v)?;
    let mean = (um - vm)?.sqr()?.sum(D::Minus1)?;
    let tr_prod = ((&uxx * &vxx)? + (&uyy * &vyy)? + ((&uxy * &vxy)? * 2.0)?)?;
    let root_det = (udet * vdet)?.maximum(EIGEN_FLOOR * EIGEN_FLOOR)?.sqrt()?;
    let cross = (tr_prod + (root_det * 2.0)?)?.maximum(EIGEN_FLOOR)?.sqrt()?;
    let trace = ((uxx + uyy)? + (vxx + vyy)? - (cross * 2.0)?)?;
    Ok((mean + trace)?.relu()?)
}
