//! Fisher information of the factor-Gaussian family and the closed-form
//! natural-gradient preconditioner.
//!
//! With `s = B'B`, `alpha = 1 / (c^2 + s)` and `r = 1 + c^2 / s`, the `(B, c)`
//! block of the information matrix is `[[A, b], [b', omega]]` with
//! `A^{-1} = (r - r^2/2) BB' + c^2 r I`, `b = 2 c alpha^2 B` and
//! `omega = (2/c^2) (d - 1 + (c^2 alpha)^2)`. The inverse is assembled from
//! inner products with `B`, so applying it costs `O(d)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result, VbillError};
use crate::linalg::dot;
use crate::variational::VariationalParams;

/// Below `s < SMALL_FACTOR * c^2` the closed form loses accuracy and the
/// dense solve is used instead.
pub const SMALL_FACTOR: f64 = 1e-8;
/// Minimum Schur complement accepted by the closed form.
pub const MIN_SCHUR: f64 = 1e-12;

/// `Sigma^{-1} v` via Woodbury: `(v - alpha B (B'v)) / c^2`.
pub fn sigma_inverse_apply(lambda: &VariationalParams, v: &[f64]) -> Result<Vec<f64>> {
    lambda.require_scale()?;
    check_dim(lambda.dim(), v.len())?;
    let c2 = lambda.c * lambda.c;
    let alpha = 1.0 / (c2 + dot(&lambda.b, &lambda.b));
    let bv = dot(&lambda.b, v);
    Ok(v
        .iter()
        .zip(&lambda.b)
        .map(|(vi, bi)| (vi - alpha * bi * bv) / c2)
        .collect())
}

/// `Sigma v = B (B'v) + c^2 v`.
pub fn sigma_apply(lambda: &VariationalParams, v: &[f64]) -> Vec<f64> {
    let bv = dot(&lambda.b, v);
    let c2 = lambda.c * lambda.c;
    v.iter()
        .zip(&lambda.b)
        .map(|(vi, bi)| bi * bv + c2 * vi)
        .collect()
}

/// Scalars of the closed-form inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherBlocks {
    pub alpha: f64,
    /// `b = b_scale * B`.
    pub b_scale: f64,
    pub omega: f64,
    /// `A^{-1} = a_inv_outer BB' + a_inv_diag I`.
    pub a_inv_outer: f64,
    pub a_inv_diag: f64,
    /// `A^{-1} b = kappa B`.
    pub kappa: f64,
    /// Schur complement `omega - b'A^{-1}b`.
    pub c2: f64,
}

pub fn fisher_blocks(lambda: &VariationalParams) -> Result<FisherBlocks> {
    lambda.require_scale()?;
    let d = lambda.dim() as f64;
    let c = lambda.c;
    let csq = c * c;
    let s = dot(&lambda.b, &lambda.b);
    let alpha = 1.0 / (csq + s);
    let r = 1.0 + csq / s;
    let a_inv_outer = r - 0.5 * r * r;
    let a_inv_diag = csq * r;
    let b_scale = 2.0 * c * alpha * alpha;
    let kappa = b_scale * (a_inv_outer * s + a_inv_diag);
    let omega = 2.0 / csq * (d - 1.0 + (csq * alpha).powi(2));
    let c2 = omega - b_scale * kappa * s;
    Ok(FisherBlocks {
        alpha,
        b_scale,
        omega,
        a_inv_outer,
        a_inv_diag,
        kappa,
        c2,
    })
}

/// Dense `(2d+1) x (2d+1)` Fisher information, assembled from `Sigma^{-1}`.
pub fn fisher_matrix(lambda: &VariationalParams) -> Result<DMatrix<f64>> {
    lambda.require_scale()?;
    let d = lambda.dim();
    let sigma = DMatrix::from_row_slice(d, d, &lambda.covariance());
    let sinv = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| VbillError::NotPositiveDefinite("variational covariance".into()))?
        .inverse();
    let b = DVector::from_column_slice(&lambda.b);
    let sinv_b = &sinv * &b;
    let bsb = b.dot(&sinv_b);
    let sinv2 = &sinv * &sinv;
    let sinv2_b = &sinv2 * &b;
    let c = lambda.c;
    let mut f = DMatrix::zeros(2 * d + 1, 2 * d + 1);
    f.view_mut((0, 0), (d, d)).copy_from(&sinv);
    let bb_block = &sinv_b * sinv_b.transpose() + &sinv * bsb;
    f.view_mut((d, d), (d, d)).copy_from(&bb_block);
    for j in 0..d {
        f[(d + j, 2 * d)] = 2.0 * c * sinv2_b[j];
        f[(2 * d, d + j)] = 2.0 * c * sinv2_b[j];
    }
    f[(2 * d, 2 * d)] = 2.0 * c * c * sinv2.trace();
    Ok(f)
}

/// `I_F(lambda)^{-1} g` for a stacked gradient `g = (g_mu, g_B, g_c)`.
///
/// For `d = 1` the family depends on `(B, c)` only through `B^2 + c^2`, so the
/// `(B, c)` block is singular; its Moore-Penrose inverse is applied instead.
pub fn natural_gradient(lambda: &VariationalParams, g: &[f64]) -> Result<Vec<f64>> {
    lambda.require_scale()?;
    let d = lambda.dim();
    check_dim(2 * d + 1, g.len())?;
    let (g_mu, rest) = g.split_at(d);
    let (g_b, g_c) = rest.split_at(d);
    let g_c = g_c[0];

    let mut out = sigma_apply(lambda, g_mu);
    let c = lambda.c;
    let s = dot(&lambda.b, &lambda.b);

    if d == 1 {
        let (w0, w1) = (lambda.b[0], c);
        let proj = 0.5 * (w0 * g_b[0] + w1 * g_c);
        out.push(proj * w0);
        out.push(proj * w1);
        return Ok(out);
    }
    if s < SMALL_FACTOR * c * c {
        return dense_natural_gradient(lambda, g);
    }

    let fb = fisher_blocks(lambda)?;
    if !(fb.c2 > MIN_SCHUR) {
        return Err(VbillError::Conditioning {
            c2: fb.c2,
            snapshot: snapshot(lambda),
        });
    }
    let bg = dot(&lambda.b, g_b);
    let k = fb.kappa;
    // (A^{-1} + k^2/c2 BB') g_B - (k/c2) B g_c
    let outer = fb.a_inv_outer * bg + k * k / fb.c2 * bg - k / fb.c2 * g_c;
    out.extend(
        lambda
            .b
            .iter()
            .zip(g_b)
            .map(|(bi, gi)| fb.a_inv_diag * gi + outer * bi),
    );
    out.push(-k / fb.c2 * bg + g_c / fb.c2);
    Ok(out)
}

/// Dense solve used when `B` is numerically negligible. Falls back to the
/// pseudo-inverse when the information matrix is singular (`B = 0`).
pub fn dense_natural_gradient(lambda: &VariationalParams, g: &[f64]) -> Result<Vec<f64>> {
    let f = fisher_matrix(lambda)?;
    let rhs = DVector::from_column_slice(g);
    if let Some(ch) = f.clone().cholesky() {
        let x = ch.solve(&rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x.iter().copied().collect());
        }
    }
    let svd = f.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    let x = svd
        .solve(&rhs, tol)
        .map_err(|e| VbillError::NotPositiveDefinite(e.to_string()))?;
    Ok(x.iter().copied().collect())
}

fn snapshot(lambda: &VariationalParams) -> String {
    format!("(mu={:?}, B={:?}, c={})", lambda.mu, lambda.b, lambda.c)
}
