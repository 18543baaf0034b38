//! Statistical models: per-observation log-likelihood contributions and their
//! derivatives, plus the latent-variable interface used by the panel models.
//!
//! Observation indices are zero-based throughout.

use std::f64::consts::PI;

use crate::error::{check_dim, Result, VbillError};
use crate::hash::ContentHash;
use crate::linalg::{dot, log1pexp, sigmoid};
use crate::par;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A model whose log-likelihood is a sum of contributions that can be
/// evaluated (with first and second derivatives) one index at a time.
pub trait Model: Send + Sync {
    /// Parameter dimension `d`.
    fn dim(&self) -> usize;
    /// Number of independent contributions `n`.
    fn n_obs(&self) -> usize;
    /// Order-independent hash of the data the model was built from.
    fn fingerprint(&self) -> u64;

    fn loglik_contrib(&self, i: usize, theta: &[f64]) -> Result<f64>;
    fn grad_contrib_into(&self, i: usize, theta: &[f64], out: &mut [f64]) -> Result<()>;
    /// Writes the row-major `d x d` Hessian of contribution `i`.
    fn hess_contrib_into(&self, i: usize, theta: &[f64], out: &mut [f64]) -> Result<()>;

    /// `out = H_i(theta) v` without materializing the Hessian when the model
    /// can avoid it.
    fn hess_apply(&self, i: usize, theta: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let mut h = vec![0.0; d * d];
        self.hess_contrib_into(i, theta, &mut h)?;
        crate::linalg::mat_vec(&h, v, out);
        Ok(())
    }

    fn grad_contrib(&self, i: usize, theta: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        self.grad_contrib_into(i, theta, &mut g)?;
        Ok(g)
    }

    fn hess_contrib(&self, i: usize, theta: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut h = vec![0.0; d * d];
        self.hess_contrib_into(i, theta, &mut h)?;
        Ok(h)
    }

    /// Sum of contributions over an index slice.
    fn loglik_sum(&self, indices: &[usize], theta: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for &i in indices {
            total += self.loglik_contrib(i, theta)?;
        }
        Ok(total)
    }

    /// Sum of gradient contributions over an index slice, written to `out`.
    fn grad_sum_into(&self, indices: &[usize], theta: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut g = vec![0.0; self.dim()];
        for &i in indices {
            self.grad_contrib_into(i, theta, &mut g)?;
            crate::linalg::axpy(1.0, &g, out);
        }
        Ok(())
    }
}

/// Full-data log-likelihood, reduced over fixed-size blocks so the result does
/// not depend on the number of worker threads.
pub fn full_loglik<M: Model + ?Sized>(model: &M, theta: &[f64]) -> Result<f64> {
    let blocks = par::blocks(model.n_obs());
    let partials = par::try_map_indices(blocks.len(), |b| {
        let mut s = 0.0;
        for i in blocks[b].clone() {
            s += model.loglik_contrib(i, theta)?;
        }
        Ok::<_, VbillError>(s)
    })?;
    Ok(partials.into_iter().sum())
}

/// Full-data gradient and Hessian sums (used by Newton fits).
pub fn full_derivatives<M: Model + ?Sized>(
    model: &M,
    indices: &[usize],
    theta: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let d = model.dim();
    let chunks: Vec<&[usize]> = indices.chunks(par::REDUCTION_BLOCK).collect();
    let partials = par::try_map_indices(chunks.len(), |b| {
        let mut v = 0.0;
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        let mut gi = vec![0.0; d];
        let mut hi = vec![0.0; d * d];
        for &i in chunks[b] {
            v += model.loglik_contrib(i, theta)?;
            model.grad_contrib_into(i, theta, &mut gi)?;
            model.hess_contrib_into(i, theta, &mut hi)?;
            crate::linalg::axpy(1.0, &gi, &mut g);
            crate::linalg::axpy(1.0, &hi, &mut h);
        }
        Ok::<_, VbillError>((v, g, h))
    })?;
    let mut v = 0.0;
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    for (pv, pg, ph) in partials {
        v += pv;
        crate::linalg::axpy(1.0, &pg, &mut g);
        crate::linalg::axpy(1.0, &ph, &mut h);
    }
    Ok((v, g, h))
}

#[inline]
fn check_index(i: usize, n: usize) -> Result<()> {
    if i >= n {
        return Err(VbillError::IndexOutOfRange { index: i, n });
    }
    Ok(())
}

fn check_theta(theta: &[f64], d: usize) -> Result<()> {
    check_dim(d, theta.len())?;
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(VbillError::non_finite("parameter vector"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Logistic regression

/// Binary logistic regression with an explicit intercept column.
#[derive(Debug, Clone)]
pub struct LogisticRegressionModel {
    d: usize,
    /// Row-major `n x d` design; column 0 is the constant 1.
    x: Vec<f64>,
    y: Vec<f64>,
    fingerprint: u64,
}

impl LogisticRegressionModel {
    /// Builds the model from design rows that already contain the intercept.
    pub fn new(design: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if design.len() != y.len() {
            return Err(VbillError::DimensionMismatch {
                expected: design.len(),
                found: y.len(),
            });
        }
        let d = design.first().map(|r| r.len()).unwrap_or(0);
        let mut x = Vec::with_capacity(design.len() * d);
        for row in &design {
            check_dim(d, row.len())?;
            x.extend_from_slice(row);
        }
        Self::from_flat(d, x, y)
    }

    /// Builds the model from raw covariates `(y, x_1..x_p)`; the intercept
    /// column is prepended.
    pub fn from_covariates(p: usize, rows: &[(f64, Vec<f64>)]) -> Result<Self> {
        let d = p + 1;
        let mut x = Vec::with_capacity(rows.len() * d);
        let mut y = Vec::with_capacity(rows.len());
        for (yi, xi) in rows {
            check_dim(p, xi.len())?;
            x.push(1.0);
            x.extend_from_slice(xi);
            y.push(*yi);
        }
        Self::from_flat(d, x, y)
    }

    pub fn from_flat(d: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != d * y.len() {
            return Err(VbillError::DimensionMismatch {
                expected: d * y.len(),
                found: x.len(),
            });
        }
        let mut hash = ContentHash::default();
        let mut buf = Vec::with_capacity(d);
        for (i, yi) in y.iter().enumerate() {
            if *yi != 0.0 && *yi != 1.0 {
                return Err(VbillError::Schema(format!(
                    "logistic response at row {i} is {yi}, expected 0 or 1"
                )));
            }
            buf.clear();
            buf.push(*yi);
            buf.extend_from_slice(&x[i * d + 1..(i + 1) * d]);
            hash.add_row(&buf);
        }
        Ok(LogisticRegressionModel {
            d,
            x,
            y,
            fingerprint: hash.finish(),
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn response(&self, i: usize) -> f64 {
        self.y[i]
    }

    /// Restriction of the model to a subset of rows (duplicates allowed).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(indices.len() * self.d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            check_index(i, self.y.len())?;
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Self::from_flat(self.d, x, y)
    }
}

impl Model for LogisticRegressionModel {
    fn dim(&self) -> usize {
        self.d
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn loglik_contrib(&self, i: usize, theta: &[f64]) -> Result<f64> {
        check_index(i, self.y.len())?;
        check_theta(theta, self.d)?;
        let eta = dot(self.row(i), theta);
        Ok(self.y[i] * eta - log1pexp(eta))
    }

    fn grad_contrib_into(&self, i: usize, theta: &[f64], out: &mut [f64]) -> Result<()> {
        check_index(i, self.y.len())?;
        check_theta(theta, self.d)?;
        let x = self.row(i);
        let r = self.y[i] - sigmoid(dot(x, theta));
        for (o, xj) in out.iter_mut().zip(x) {
            *o = r * xj;
        }
        Ok(())
    }

    fn hess_contrib_into(&self, i: usize, theta: &[f64], out: &mut [f64]) -> Result<()> {
        check_index(i, self.y.len())?;
        check_theta(theta, self.d)?;
        let x = self.row(i);
        let p = sigmoid(dot(x, theta));
        let w = -p * (1.0 - p);
        let d = self.d;
        for a in 0..d {
            for b in 0..d {
                out[a * d + b] = w * x[a] * x[b];
            }
        }
        Ok(())
    }

    fn hess_apply(&self, i: usize, theta: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        check_index(i, self.y.len())?;
        let x = self.row(i);
        let p = sigmoid(dot(x, theta));
        let s = -p * (1.0 - p) * dot(x, v);
        for (o, xj) in out.iter_mut().zip(x) {
            *o = s * xj;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Conjugate Gaussian (oracle model)

/// `y_i ~ N(theta, I + v v')` with known `v`; `v = 0` gives unit variance.
///
/// The log-likelihood is quadratic in `theta`, so posteriors, evidences and
/// lower bounds are available in closed form.
#[derive(Debug, Clone)]
pub struct ConjugateGaussianModel {
    d: usize,
    y: Vec<f64>,
    factor: Vec<f64>,
    /// Row-major precision `(I + v v')^{-1}`.
    precision: Vec<f64>,
    log_det_cov: f64,
    fingerprint: u64,
}

impl ConjugateGaussianModel {
    pub fn new(observations: Vec<Vec<f64>>, d: usize) -> Result<Self> {
        Self::with_factor(observations, vec![0.0; d])
    }

    pub fn with_factor(observations: Vec<Vec<f64>>, factor: Vec<f64>) -> Result<Self> {
        let d = factor.len();
        if d == 0 {
            return Err(VbillError::InvalidParameter("dimension must be positive".into()));
        }
        let mut y = Vec::with_capacity(observations.len() * d);
        let mut hash = ContentHash::default();
        for row in &observations {
            check_dim(d, row.len())?;
            if !row.iter().all(|v| v.is_finite()) {
                return Err(VbillError::non_finite("gaussian observation"));
            }
            hash.add_row(row);
            y.extend_from_slice(row);
        }
        let vv = dot(&factor, &factor);
        let mut precision = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                let id = if a == b { 1.0 } else { 0.0 };
                precision[a * d + b] = id - factor[a] * factor[b] / (1.0 + vv);
            }
        }
        Ok(ConjugateGaussianModel {
            d,
            y,
            factor,
            precision,
            log_det_cov: vv.ln_1p(),
            fingerprint: hash.finish(),
        })
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.y[i * self.d..(i + 1) * self.d]
    }

    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    /// Row-major observation precision matrix.
    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    fn residual_precision(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let r = crate::linalg::sub(self.observation(i), theta);
        crate::linalg::mat_vec(&self.precision, &r, out);
    }
}

impl Model for ConjugateGaussianModel {
    fn dim(&self) -> usize {
        self.d
    }

    fn n_obs(&self) -> usize {
        self.y.len() / self.d
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn loglik_contrib(&self, i: usize, theta: &[f64]) -> Result<f64> {
        check_index(i, self.n_obs())?;
        check_theta(theta, self.d)?;
        let r = crate::linalg::sub(self.observation(i), theta);
        let mut pr = vec![0.0; self.d];
        crate::linalg::mat_vec(&self.precision, &r, &mut pr);
        Ok(-(self.d as f64) * HALF_LN_2PI - 0.5 * self.log_det_cov - 0.5 * dot(&r, &pr))
    }

    fn grad_contrib_into(&self, i: usize, theta: &[f64], out: &mut [f64]) -> Result<()> {
        check_index(i, self.n_obs())?;
        check_theta(theta, self.d)?;
        self.residual_precision(i, theta, out);
        Ok(())
    }

    fn hess_contrib_into(&self, i: usize, theta: &[f64], out: &mut [f64]) -> Result<()> {
        check_index(i, self.n_obs())?;
        check_theta(theta, self.d)?;
        for (o, p) in out.iter_mut().zip(&self.precision) {
            *o = -p;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Latent-variable (panel) models

/// Joint density of one panel and its scalar random effect, with the panel's
/// parameter-dependent quantities already evaluated.
pub trait PanelDensity {
    /// `log p(y_i, alpha | theta)`. When given, `grad` receives the
    /// theta-gradient and `hess` the row-major theta-Hessian (overwritten).
    fn joint(&self, alpha: f64, grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> f64;
    /// First and second derivatives of `log p(y_i, alpha | theta)` in `alpha`.
    fn alpha_derivs(&self, alpha: f64) -> (f64, f64);
    /// Prior variance of the random effect, `tau^2 = exp(gamma)`.
    fn latent_variance(&self) -> f64;
    /// Number of observations in the panel.
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A panel model `p(y_i | theta) = ∫ p(y_i | theta, a) p(a | theta) da`.
pub trait LatentModel: Send + Sync {
    type Panel<'a>: PanelDensity
    where
        Self: 'a;

    fn dim(&self) -> usize;
    fn n_panels(&self) -> usize;
    fn fingerprint(&self) -> u64;
    fn panel(&self, i: usize, theta: &[f64]) -> Result<Self::Panel<'_>>;

    /// Joint log-density and its theta-gradient at a latent value.
    fn joint_logdensity_and_grad(
        &self,
        i: usize,
        theta: &[f64],
        alpha: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if !alpha.is_finite() {
            return Err(VbillError::non_finite("latent value"));
        }
        let panel = self.panel(i, theta)?;
        let mut g = vec![0.0; self.dim()];
        let v = panel.joint(alpha, Some(&mut g), None);
        Ok((v, g))
    }
}

#[inline]
fn log_normal_latent(alpha: f64, gamma: f64) -> f64 {
    -HALF_LN_2PI - 0.5 * gamma - 0.5 * alpha * alpha * (-gamma).exp()
}

/// Logistic regression with a Gaussian random intercept per panel:
/// `logit p_it = x_it' beta + alpha_i`, `alpha_i ~ N(0, exp(gamma))`.
///
/// `theta = (beta, gamma)` where `beta` includes the intercept.
#[derive(Debug, Clone)]
pub struct PanelLogisticModel {
    /// Design width including the intercept.
    k: usize,
    /// Row-major design of all observations, panels stored contiguously.
    x: Vec<f64>,
    y: Vec<f64>,
    /// Start offsets of each panel in `y`, plus a final sentinel.
    offsets: Vec<usize>,
    fingerprint: u64,
}

impl PanelLogisticModel {
    /// `panels[i]` holds `(y_it, x_it)` with raw covariates (no intercept).
    pub fn from_covariates(p: usize, panels: &[Vec<(f64, Vec<f64>)>]) -> Result<Self> {
        let k = p + 1;
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut offsets = vec![0];
        let mut hash = ContentHash::default();
        for (i, panel) in panels.iter().enumerate() {
            if panel.is_empty() {
                return Err(VbillError::Schema(format!("panel {i} has no observations")));
            }
            for (t, (yi, xi)) in panel.iter().enumerate() {
                check_dim(p, xi.len())?;
                if *yi != 0.0 && *yi != 1.0 {
                    return Err(VbillError::Schema(format!(
                        "panel {i} observation {t} has response {yi}"
                    )));
                }
                let mut row = vec![i as f64, t as f64, *yi];
                row.extend_from_slice(xi);
                hash.add_row(&row);
                x.push(1.0);
                x.extend_from_slice(xi);
                y.push(*yi);
            }
            offsets.push(y.len());
        }
        Ok(PanelLogisticModel {
            k,
            x,
            y,
            offsets,
            fingerprint: hash.finish(),
        })
    }

    pub fn n_covariates(&self) -> usize {
        self.k - 1
    }

    /// Restriction to a subset of panels (in the given order).
    pub fn subset(&self, panels: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(panels.len());
        for &i in panels {
            check_index(i, self.n_panels())?;
            let mut panel = Vec::new();
            for t in self.offsets[i]..self.offsets[i + 1] {
                panel.push((self.y[t], self.x[t * self.k + 1..(t + 1) * self.k].to_vec()));
            }
            rows.push(panel);
        }
        Self::from_covariates(self.k - 1, &rows)
    }
}

pub struct LogisticPanel<'a> {
    k: usize,
    x: &'a [f64],
    y: &'a [f64],
    /// `x_it' beta` for each observation.
    linear: Vec<f64>,
    gamma: f64,
}

impl PanelDensity for LogisticPanel<'_> {
    fn joint(&self, alpha: f64, grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> f64 {
        let k = self.k;
        let inv_tau2 = (-self.gamma).exp();
        let mut value = log_normal_latent(alpha, self.gamma);
        let mut grad = grad;
        let mut hess = hess;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
            g[k] = 0.5 * (alpha * alpha * inv_tau2 - 1.0);
        }
        if let Some(h) = hess.as_deref_mut() {
            h.iter_mut().for_each(|v| *v = 0.0);
            h[k * (k + 1) + k] = -0.5 * alpha * alpha * inv_tau2;
        }
        let d = k + 1;
        for (t, (&lin, &y)) in self.linear.iter().zip(self.y).enumerate() {
            let eta = lin + alpha;
            value += y * eta - log1pexp(eta);
            if grad.is_none() && hess.is_none() {
                continue;
            }
            let row = &self.x[t * k..(t + 1) * k];
            let p = sigmoid(eta);
            if let Some(g) = grad.as_deref_mut() {
                let r = y - p;
                for (gj, xj) in g.iter_mut().zip(row) {
                    *gj += r * xj;
                }
            }
            if let Some(h) = hess.as_deref_mut() {
                let w = -p * (1.0 - p);
                for a in 0..k {
                    let wa = w * row[a];
                    for b in 0..k {
                        h[a * d + b] += wa * row[b];
                    }
                }
            }
        }
        value
    }

    fn alpha_derivs(&self, alpha: f64) -> (f64, f64) {
        let inv_tau2 = (-self.gamma).exp();
        let mut d1 = -alpha * inv_tau2;
        let mut d2 = -inv_tau2;
        for (&lin, &y) in self.linear.iter().zip(self.y) {
            let p = sigmoid(lin + alpha);
            d1 += y - p;
            d2 -= p * (1.0 - p);
        }
        (d1, d2)
    }

    fn latent_variance(&self) -> f64 {
        self.gamma.exp()
    }

    fn len(&self) -> usize {
        self.y.len()
    }
}

impl LatentModel for PanelLogisticModel {
    type Panel<'a> = LogisticPanel<'a>;

    fn dim(&self) -> usize {
        self.k + 1
    }

    fn n_panels(&self) -> usize {
        self.offsets.len() - 1
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn panel(&self, i: usize, theta: &[f64]) -> Result<LogisticPanel<'_>> {
        check_index(i, self.n_panels())?;
        check_theta(theta, self.k + 1)?;
        let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
        let x = &self.x[lo * self.k..hi * self.k];
        let beta = &theta[..self.k];
        let linear = x.chunks_exact(self.k).map(|row| dot(row, beta)).collect();
        Ok(LogisticPanel {
            k: self.k,
            x,
            y: &self.y[lo..hi],
            linear,
            gamma: theta[self.k],
        })
    }
}

impl Model for PanelLogisticModel {
    fn dim(&self) -> usize {
        self.k + 1
    }

    fn n_obs(&self) -> usize {
        self.n_panels()
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn loglik_contrib(&self, _i: usize, _theta: &[f64]) -> Result<f64> {
        Err(VbillError::Intractable("panel log-likelihood contribution"))
    }

    fn grad_contrib_into(&self, _i: usize, _theta: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(VbillError::Intractable("panel score contribution"))
    }

    fn hess_contrib_into(&self, _i: usize, _theta: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(VbillError::Intractable("panel Hessian contribution"))
    }
}

/// `y_it | a_i ~ N(a_i, 1)`, `a_i ~ N(0, exp(gamma))`, `theta = gamma`.
///
/// Both the latent-variable form and the exact marginal are available, which
/// makes this the reference model for the importance-sampling estimators.
#[derive(Debug, Clone)]
pub struct NormalNormalPanelModel {
    panels: Vec<Vec<f64>>,
    fingerprint: u64,
}

impl NormalNormalPanelModel {
    pub fn new(panels: Vec<Vec<f64>>) -> Result<Self> {
        let mut hash = ContentHash::default();
        for (i, p) in panels.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(VbillError::non_finite(format!("panel {i}")));
            }
            for (t, y) in p.iter().enumerate() {
                hash.add_row(&[i as f64, t as f64, *y]);
            }
        }
        Ok(NormalNormalPanelModel {
            panels,
            fingerprint: hash.finish(),
        })
    }

    pub fn panel_data(&self, i: usize) -> &[f64] {
        &self.panels[i]
    }

    fn sums(&self, i: usize) -> (f64, f64, f64) {
        let p = &self.panels[i];
        let t = p.len() as f64;
        let s: f64 = p.iter().sum();
        let ss: f64 = p.iter().map(|y| y * y).sum();
        (t, s, ss)
    }
}

pub struct NormalPanel<'a> {
    y: &'a [f64],
    gamma: f64,
}

impl PanelDensity for NormalPanel<'_> {
    fn joint(&self, alpha: f64, grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> f64 {
        let inv_tau2 = (-self.gamma).exp();
        let mut value = log_normal_latent(alpha, self.gamma);
        for y in self.y {
            value += -HALF_LN_2PI - 0.5 * (y - alpha) * (y - alpha);
        }
        if let Some(g) = grad {
            g[0] = 0.5 * (alpha * alpha * inv_tau2 - 1.0);
        }
        if let Some(h) = hess {
            h[0] = -0.5 * alpha * alpha * inv_tau2;
        }
        value
    }

    fn alpha_derivs(&self, alpha: f64) -> (f64, f64) {
        let inv_tau2 = (-self.gamma).exp();
        let s: f64 = self.y.iter().map(|y| y - alpha).sum();
        (s - alpha * inv_tau2, -(self.y.len() as f64) - inv_tau2)
    }

    fn latent_variance(&self) -> f64 {
        self.gamma.exp()
    }

    fn len(&self) -> usize {
        self.y.len()
    }
}

impl LatentModel for NormalNormalPanelModel {
    type Panel<'a> = NormalPanel<'a>;

    fn dim(&self) -> usize {
        1
    }

    fn n_panels(&self) -> usize {
        self.panels.len()
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn panel(&self, i: usize, theta: &[f64]) -> Result<NormalPanel<'_>> {
        check_index(i, self.panels.len())?;
        check_theta(theta, 1)?;
        Ok(NormalPanel {
            y: &self.panels[i],
            gamma: theta[0],
        })
    }
}

impl Model for NormalNormalPanelModel {
    fn dim(&self) -> usize {
        1
    }

    fn n_obs(&self) -> usize {
        self.panels.len()
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Exact marginal `log N(y_i; 0, I + tau^2 11')`.
    fn loglik_contrib(&self, i: usize, theta: &[f64]) -> Result<f64> {
        check_index(i, self.panels.len())?;
        check_theta(theta, 1)?;
        let (t, s, ss) = self.sums(i);
        let a = theta[0].exp();
        let det = 1.0 + t * a;
        Ok(-t * 0.5 * (2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * (ss - a * s * s / det))
    }

    fn grad_contrib_into(&self, i: usize, theta: &[f64], out: &mut [f64]) -> Result<()> {
        check_index(i, self.panels.len())?;
        check_theta(theta, 1)?;
        let (t, s, _) = self.sums(i);
        let a = theta[0].exp();
        let det = 1.0 + t * a;
        out[0] = a * (-t / (2.0 * det) + s * s / (2.0 * det * det));
        Ok(())
    }

    fn hess_contrib_into(&self, i: usize, theta: &[f64], out: &mut [f64]) -> Result<()> {
        check_index(i, self.panels.len())?;
        check_theta(theta, 1)?;
        let (t, s, _) = self.sums(i);
        let a = theta[0].exp();
        let det = 1.0 + t * a;
        let h = -t / (2.0 * det) + s * s / (2.0 * det * det);
        let dh = t * t / (2.0 * det * det) - t * s * s / (det * det * det);
        out[0] = a * h + a * a * dh;
        Ok(())
    }
}
