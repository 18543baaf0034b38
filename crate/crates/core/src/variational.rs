//! The factor-Gaussian variational family `q = N(mu, BB' + c^2 I)`.
//!
//! Parameters are stacked as `(mu, B, c)`, a vector of length `2d + 1`.
//! Draws use `theta = mu + B z + c eps` with scalar `z` and `d`-vector `eps`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, VbillError};
use crate::linalg::{all_finite, dot};
use crate::natgrad::sigma_inverse_apply;
use crate::rqmc;
use crate::stream::StreamKey;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub mu: Vec<f64>,
    pub b: Vec<f64>,
    /// Isotropic scale, stored unconstrained; only `c^2` enters the law.
    pub c: f64,
}

impl VariationalParams {
    pub fn new(mu: Vec<f64>, b: Vec<f64>, c: f64) -> Result<Self> {
        check_dim(mu.len(), b.len())?;
        let p = VariationalParams { mu, b, c };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Length of the stacked parameter vector.
    pub fn stacked_len(&self) -> usize {
        2 * self.dim() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !all_finite(&self.mu) || !all_finite(&self.b) || !self.c.is_finite() {
            return Err(VbillError::non_finite("variational parameters"));
        }
        Ok(())
    }

    pub(crate) fn require_scale(&self) -> Result<()> {
        if self.c == 0.0 {
            return Err(VbillError::InvalidParameter(
                "isotropic scale c must be non-zero".into(),
            ));
        }
        Ok(())
    }

    pub fn to_stacked(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.stacked_len());
        v.extend_from_slice(&self.mu);
        v.extend_from_slice(&self.b);
        v.push(self.c);
        v
    }

    pub fn from_stacked(v: &[f64], d: usize) -> Result<Self> {
        check_dim(2 * d + 1, v.len())?;
        Ok(VariationalParams {
            mu: v[..d].to_vec(),
            b: v[d..2 * d].to_vec(),
            c: v[2 * d],
        })
    }

    /// Row-major dense covariance `BB' + c^2 I`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut s = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                s[a * d + b] = self.b[a] * self.b[b];
            }
            s[a * d + a] += self.c * self.c;
        }
        s
    }

    /// Marginal standard deviation of coordinate `j`.
    pub fn marginal_sd(&self, j: usize) -> f64 {
        (self.b[j] * self.b[j] + self.c * self.c).sqrt()
    }

    /// `log |BB' + c^2 I|`.
    pub fn log_det(&self) -> f64 {
        let d = self.dim() as f64;
        let c2 = self.c * self.c;
        d * c2.ln() + (dot(&self.b, &self.b) / c2).ln_1p()
    }
}

/// Isotropic Gaussian prior `N(0, variance I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub variance: f64,
}

impl PriorSpec {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(VbillError::InvalidParameter(format!(
                "prior variance must be positive, got {variance}"
            )));
        }
        Ok(PriorSpec { variance })
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let d = theta.len() as f64;
        -0.5 * d * (LN_2PI + self.variance.ln()) - 0.5 * dot(theta, theta) / self.variance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    Mc,
    Rqmc,
}

impl std::str::FromStr for PointSource {
    type Err = VbillError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mc" => Ok(PointSource::Mc),
            "rqmc" | "qmc" => Ok(PointSource::Rqmc),
            other => Err(VbillError::InvalidParameter(format!(
                "unknown point source `{other}` (expected mc or rqmc)"
            ))),
        }
    }
}

impl std::fmt::Display for PointSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PointSource::Mc => "mc",
            PointSource::Rqmc => "rqmc",
        })
    }
}

/// `S` standard-normal innovations `(z_s, eps_s)`.
#[derive(Debug, Clone)]
pub struct DrawBatch {
    pub z: Vec<f64>,
    /// Row-major `S x d`.
    pub eps: Vec<f64>,
    pub dim: usize,
    pub source: PointSource,
}

impl DrawBatch {
    /// Generates `count` draws in dimension `dim`. RQMC batches are one
    /// scrambled Sobol' net of dimension `dim + 1` seeded from `key`.
    pub fn generate(count: usize, dim: usize, source: PointSource, key: StreamKey) -> Result<Self> {
        if count == 0 {
            return Err(VbillError::InvalidParameter("draw count must be positive".into()));
        }
        let width = dim + 1;
        let normals = match source {
            PointSource::Mc => {
                let mut rng = key.rng();
                (0..count * width)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect::<Vec<f64>>()
            }
            PointSource::Rqmc => rqmc::to_normal(&rqmc::sobol_batch(width, count, key.0, true)?)?,
        };
        let mut z = Vec::with_capacity(count);
        let mut eps = Vec::with_capacity(count * dim);
        for row in normals.chunks_exact(width) {
            z.push(row[0]);
            eps.extend_from_slice(&row[1..]);
        }
        Ok(DrawBatch {
            z,
            eps,
            dim,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn eps_row(&self, s: usize) -> &[f64] {
        &self.eps[s * self.dim..(s + 1) * self.dim]
    }

    /// All parameter draws `theta_s`, row-major.
    pub fn thetas(&self, lambda: &VariationalParams) -> Result<Vec<Vec<f64>>> {
        (0..self.len())
            .map(|s| reparam_draw(lambda, self.z[s], self.eps_row(s)))
            .collect()
    }
}

/// `theta = mu + B z + c eps`.
pub fn reparam_draw(lambda: &VariationalParams, z: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_dim(lambda.dim(), eps.len())?;
    Ok(lambda
        .mu
        .iter()
        .zip(&lambda.b)
        .zip(eps)
        .map(|((m, b), e)| m + b * z + lambda.c * e)
        .collect())
}

/// `E_q[log p(theta) - log q(theta)]` for the isotropic Gaussian prior,
/// including all normalizing constants.
pub fn prior_term_a(lambda: &VariationalParams, prior: &PriorSpec) -> Result<f64> {
    lambda.require_scale()?;
    let d = lambda.dim() as f64;
    let s0 = prior.variance;
    let second_moment =
        dot(&lambda.mu, &lambda.mu) + dot(&lambda.b, &lambda.b) + d * lambda.c * lambda.c;
    let expected_log_prior = -0.5 * d * (LN_2PI + s0.ln()) - second_moment / (2.0 * s0);
    let entropy = 0.5 * d * (1.0 + LN_2PI) + 0.5 * lambda.log_det();
    Ok(expected_log_prior + entropy)
}

/// Stacked gradient of [`prior_term_a`].
pub fn grad_a(lambda: &VariationalParams, prior: &PriorSpec) -> Result<Vec<f64>> {
    lambda.require_scale()?;
    let d = lambda.dim();
    let s0 = prior.variance;
    let c = lambda.c;
    let bb = dot(&lambda.b, &lambda.b);
    let alpha = 1.0 / (c * c + bb);
    let mut g = Vec::with_capacity(2 * d + 1);
    g.extend(lambda.mu.iter().map(|m| -m / s0));
    g.extend(lambda.b.iter().map(|b| -(1.0 / s0 - alpha) * b));
    g.push(-(d as f64) * c / s0 + (d as f64 - bb * alpha) / c);
    Ok(g)
}

/// Reparameterization estimate of the lower-bound gradient from `S` draws
/// and one log-likelihood gradient estimate per draw. Draws are reduced in
/// index order.
pub fn lb_gradient_estimate(
    lambda: &VariationalParams,
    draws: &DrawBatch,
    gradients: &[Vec<f64>],
    prior: &PriorSpec,
) -> Result<Vec<f64>> {
    let d = lambda.dim();
    if draws.is_empty() {
        return Err(VbillError::Empty("draw batch"));
    }
    check_dim(draws.len(), gradients.len())?;
    check_dim(d, draws.dim)?;
    let mut acc = vec![0.0; 2 * d + 1];
    for (s, g) in gradients.iter().enumerate() {
        check_dim(d, g.len())?;
        if !all_finite(g) {
            return Err(VbillError::non_finite(format!(
                "log-likelihood gradient estimate for draw {s}"
            )));
        }
        let z = draws.z[s];
        for j in 0..d {
            acc[j] += g[j];
            acc[d + j] += z * g[j];
        }
        acc[2 * d] += dot(draws.eps_row(s), g);
    }
    let inv = 1.0 / draws.len() as f64;
    let mut out = grad_a(lambda, prior)?;
    for (o, a) in out.iter_mut().zip(&acc) {
        *o += a * inv;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundEstimate {
    pub value: f64,
    /// `value / n`.
    pub scaled_value: f64,
    pub iteration: usize,
}

/// `A(lambda) + mean(loglik estimates)`.
pub fn lower_bound_estimate(
    lambda: &VariationalParams,
    logliks: &[f64],
    prior: &PriorSpec,
    n: usize,
    iteration: usize,
) -> Result<LowerBoundEstimate> {
    if logliks.is_empty() {
        return Err(VbillError::Empty("log-likelihood estimates"));
    }
    let mean = logliks.iter().sum::<f64>() / logliks.len() as f64;
    let value = prior_term_a(lambda, prior)? + mean;
    let scaled_value = value / n.max(1) as f64;
    if !scaled_value.is_finite() {
        return Err(VbillError::non_finite(format!(
            "lower bound at iteration {iteration}"
        )));
    }
    Ok(LowerBoundEstimate {
        value,
        scaled_value,
        iteration,
    })
}

/// `log q_lambda(theta)`.
pub fn log_density(lambda: &VariationalParams, theta: &[f64]) -> Result<f64> {
    lambda.require_scale()?;
    check_dim(lambda.dim(), theta.len())?;
    let r = crate::linalg::sub(theta, &lambda.mu);
    let q = dot(&r, &sigma_inverse_apply(lambda, &r)?);
    Ok(-0.5 * lambda.dim() as f64 * LN_2PI - 0.5 * lambda.log_det() - 0.5 * q)
}

/// Log-density of the one-dimensional marginal of coordinate `j`.
pub fn marginal_log_density(lambda: &VariationalParams, j: usize, x: f64) -> f64 {
    let sd = lambda.marginal_sd(j);
    let r = (x - lambda.mu[j]) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * r * r
}
