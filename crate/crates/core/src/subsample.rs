//! Control-variate difference estimators of the log-likelihood and its
//! gradient from a with-replacement subsample.
//!
//! Around a central value `theta_bar` each contribution is approximated by
//! its Taylor expansion. The full-data sums of the expansion terms are
//! computed once ([`ControlVariateCache`]); each estimate then adds the
//! scaled sum of residuals over a subsample.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, VbillError};
use crate::linalg::{all_finite, axpy, dot, mat_vec, sub};
use crate::model::Model;
use crate::par;
use crate::stream::StreamKey;

/// Per-index access to contributions, their (possibly estimated) values at an
/// arbitrary `theta`, and the exact expansion terms at the central value.
pub trait Contributions: Send + Sync {
    fn dim(&self) -> usize;
    fn n_obs(&self) -> usize;
    fn fingerprint(&self) -> u64;

    /// Returns `l_i(theta)` and writes `g_i(theta)` to `grad`. Estimated
    /// contributions draw their randomness from `key`.
    fn value_and_grad(&self, i: usize, theta: &[f64], key: StreamKey, grad: &mut [f64])
        -> Result<f64>;

    /// Returns `l_i(theta_bar)`, writes `g_i(theta_bar)` to `grad` and
    /// `H_i(theta_bar) delta` to `h_delta`.
    fn center_terms(
        &self,
        i: usize,
        theta_bar: &[f64],
        delta: &[f64],
        grad: &mut [f64],
        h_delta: &mut [f64],
    ) -> Result<f64>;

    /// Row-major `H_i(theta_bar)`.
    fn center_hessian(&self, i: usize, theta_bar: &[f64], hess: &mut [f64]) -> Result<()>;
}

impl<M: Model> Contributions for M {
    fn dim(&self) -> usize {
        Model::dim(self)
    }

    fn n_obs(&self) -> usize {
        Model::n_obs(self)
    }

    fn fingerprint(&self) -> u64 {
        Model::fingerprint(self)
    }

    fn value_and_grad(
        &self,
        i: usize,
        theta: &[f64],
        _key: StreamKey,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.grad_contrib_into(i, theta, grad)?;
        self.loglik_contrib(i, theta)
    }

    fn center_terms(
        &self,
        i: usize,
        theta_bar: &[f64],
        delta: &[f64],
        grad: &mut [f64],
        h_delta: &mut [f64],
    ) -> Result<f64> {
        self.grad_contrib_into(i, theta_bar, grad)?;
        self.hess_apply(i, theta_bar, delta, h_delta)?;
        self.loglik_contrib(i, theta_bar)
    }

    fn center_hessian(&self, i: usize, theta_bar: &[f64], hess: &mut [f64]) -> Result<()> {
        self.hess_contrib_into(i, theta_bar, hess)
    }
}

/// Full-data expansion sums at the central value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVariateCache {
    pub theta_bar: Vec<f64>,
    /// `sum_i l_i(theta_bar)`
    pub loglik_bar: f64,
    /// `sum_i g_i(theta_bar)`
    pub grad_bar: Vec<f64>,
    /// Row-major `sum_i H_i(theta_bar)`.
    pub hess_bar: Vec<f64>,
    pub n: usize,
    pub fingerprint: u64,
}

/// Partial sums over a range of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSums {
    pub loglik: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    pub count: usize,
}

impl CenterSums {
    pub fn zero(d: usize) -> Self {
        CenterSums {
            loglik: 0.0,
            grad: vec![0.0; d],
            hess: vec![0.0; d * d],
            count: 0,
        }
    }

    pub fn merge(&mut self, other: &CenterSums) {
        self.loglik += other.loglik;
        axpy(1.0, &other.grad, &mut self.grad);
        axpy(1.0, &other.hess, &mut self.hess);
        self.count += other.count;
    }

    /// Sums over `indices` of a contribution source, in index order.
    pub fn accumulate<C: Contributions + ?Sized>(
        contrib: &C,
        indices: impl Iterator<Item = usize>,
        theta_bar: &[f64],
    ) -> Result<Self> {
        let d = contrib.dim();
        let mut acc = CenterSums::zero(d);
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        let zero = vec![0.0; d];
        let mut hd = vec![0.0; d];
        for i in indices {
            let v = contrib.center_terms(i, theta_bar, &zero, &mut g, &mut hd)?;
            contrib.center_hessian(i, theta_bar, &mut h)?;
            if !v.is_finite() || !all_finite(&g) || !all_finite(&h) {
                return Err(VbillError::non_finite(format!(
                    "contribution {i} at the central value"
                )));
            }
            acc.loglik += v;
            axpy(1.0, &g, &mut acc.grad);
            axpy(1.0, &h, &mut acc.hess);
            acc.count += 1;
        }
        Ok(acc)
    }
}

impl ControlVariateCache {
    pub fn from_sums(theta_bar: Vec<f64>, mut sums: CenterSums, fingerprint: u64) -> Self {
        symmetrize(&mut sums.hess, theta_bar.len());
        ControlVariateCache {
            theta_bar,
            loglik_bar: sums.loglik,
            grad_bar: sums.grad,
            hess_bar: sums.hess,
            n: sums.count,
            fingerprint,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_bar.len()
    }

    /// Errors unless the cache was built from data with this fingerprint.
    pub fn check_fingerprint(&self, fingerprint: u64) -> Result<()> {
        if self.fingerprint != fingerprint {
            return Err(VbillError::FingerprintMismatch {
                expected: self.fingerprint,
                found: fingerprint,
            });
        }
        Ok(())
    }

    /// Control variate `w(theta) = A + B (theta - theta_bar)`.
    pub fn linear_term(&self, theta: &[f64]) -> Vec<f64> {
        let delta = sub(theta, &self.theta_bar);
        let mut out = vec![0.0; self.dim()];
        mat_vec(&self.hess_bar, &delta, &mut out);
        axpy(1.0, &self.grad_bar, &mut out);
        out
    }

    /// Second-order expansion of the full log-likelihood at `theta`.
    pub fn quadratic_term(&self, theta: &[f64]) -> f64 {
        let delta = sub(theta, &self.theta_bar);
        let mut bd = vec![0.0; self.dim()];
        mat_vec(&self.hess_bar, &delta, &mut bd);
        self.loglik_bar + dot(&self.grad_bar, &delta) + 0.5 * dot(&delta, &bd)
    }

    /// Little-endian binary record: `d, n, fingerprint` as u64, then
    /// `theta_bar, loglik_bar, grad_bar, hess_bar` as f64.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for v in [self.dim() as u64, self.n as u64, self.fingerprint] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let floats = self
            .theta_bar
            .iter()
            .chain(std::iter::once(&self.loglik_bar))
            .chain(&self.grad_bar)
            .chain(&self.hess_bar);
        for v in floats {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| VbillError::io(path, e))?;
        f.write_all(&buf).map_err(|e| VbillError::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| VbillError::io(path, e))?;
        let word = |k: usize| -> Result<[u8; 8]> {
            bytes
                .get(k * 8..k * 8 + 8)
                .map(|s| s.try_into().expect("slice of length 8"))
                .ok_or_else(|| VbillError::Schema(format!("{} is truncated", path.display())))
        };
        let d = u64::from_le_bytes(word(0)?) as usize;
        let n = u64::from_le_bytes(word(1)?) as usize;
        let fingerprint = u64::from_le_bytes(word(2)?);
        let expected = 3 + d + 1 + d + d * d;
        if bytes.len() != expected * 8 {
            return Err(VbillError::Schema(format!(
                "{} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                expected * 8
            )));
        }
        let floats: Vec<f64> = (3..expected)
            .map(|k| word(k).map(f64::from_le_bytes))
            .collect::<Result<_>>()?;
        Ok(ControlVariateCache {
            theta_bar: floats[..d].to_vec(),
            loglik_bar: floats[d],
            grad_bar: floats[d + 1..2 * d + 1].to_vec(),
            hess_bar: floats[2 * d + 1..].to_vec(),
            n,
            fingerprint,
        })
    }
}

fn symmetrize(h: &mut [f64], d: usize) {
    for a in 0..d {
        for b in a + 1..d {
            let v = 0.5 * (h[a * d + b] + h[b * d + a]);
            h[a * d + b] = v;
            h[b * d + a] = v;
        }
    }
}

/// Builds the cache with one pass over all contributions. Partial sums over
/// fixed blocks are combined in block order.
pub fn build_control_variates<C: Contributions + ?Sized>(
    contrib: &C,
    theta_bar: &[f64],
) -> Result<ControlVariateCache> {
    check_dim(contrib.dim(), theta_bar.len())?;
    if !all_finite(theta_bar) {
        return Err(VbillError::non_finite("central value"));
    }
    let blocks = par::blocks(contrib.n_obs());
    let partials = par::try_map_indices(blocks.len(), |b| {
        CenterSums::accumulate(contrib, blocks[b].clone(), theta_bar)
    })?;
    let mut total = CenterSums::zero(contrib.dim());
    for p in &partials {
        total.merge(p);
    }
    Ok(ControlVariateCache::from_sums(
        theta_bar.to_vec(),
        total,
        contrib.fingerprint(),
    ))
}

/// Indices drawn uniformly with replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsamplePlan {
    pub indices: Vec<usize>,
}

impl SubsamplePlan {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(VbillError::IndexOutOfRange { index: bad, n });
        }
        Ok(SubsamplePlan { indices })
    }

    pub fn draw(n: usize, m: usize, key: StreamKey) -> Result<Self> {
        if n == 0 {
            return Err(VbillError::Empty("dataset"));
        }
        if m == 0 {
            return Err(VbillError::InvalidParameter("subsample size must be positive".into()));
        }
        let mut rng = key.rng();
        Ok(SubsamplePlan {
            indices: (0..m).map(|_| rng.random_range(0..n)).collect(),
        })
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }
}

/// A subsample drawn within one stratum (chunk) of `size` observations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stratum {
    pub size: usize,
    /// Global indices, all inside the stratum.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub value: Vec<f64>,
    pub m: usize,
    /// Per-coordinate sample variance of the scaled residual terms
    /// (`n d_u` for a single plan).
    pub sample_variance: Vec<f64>,
}

/// Gradient and log-likelihood estimates at one parameter draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawEstimate {
    pub gradient: GradientEstimate,
    pub loglik: f64,
}

/// Residuals of one subsampled index: `(d_u gradient, d_u loglik)`.
fn residual<C: Contributions + ?Sized>(
    contrib: &C,
    u: usize,
    theta: &[f64],
    delta: &[f64],
    cache: &ControlVariateCache,
    key: StreamKey,
) -> Result<(Vec<f64>, f64)> {
    let d = contrib.dim();
    let mut g = vec![0.0; d];
    let mut g_bar = vec![0.0; d];
    let mut h_delta = vec![0.0; d];
    let l = contrib.value_and_grad(u, theta, key, &mut g)?;
    let l_bar = contrib.center_terms(u, &cache.theta_bar, delta, &mut g_bar, &mut h_delta)?;
    let q = l_bar + dot(&g_bar, delta) + 0.5 * dot(delta, &h_delta);
    for j in 0..d {
        g[j] -= g_bar[j] + h_delta[j];
    }
    if !all_finite(&g) || !l.is_finite() {
        return Err(VbillError::non_finite(format!("contribution {u} at {theta:?}")));
    }
    Ok((g, l - q))
}

/// Stratified difference estimator:
/// `w(theta) + sum_k (n_k / m_k) sum_{u in k} d_u(theta)`, with the matching
/// second-order estimator of the log-likelihood. A single stratum of size `n`
/// is the plain subsampled estimator.
///
/// The `j`-th index of the flattened strata uses the random stream
/// `key.child(j)`.
pub fn estimate_stratified<C: Contributions + ?Sized>(
    contrib: &C,
    theta: &[f64],
    cache: &ControlVariateCache,
    strata: &[Stratum],
    key: StreamKey,
) -> Result<DrawEstimate> {
    let d = contrib.dim();
    check_dim(d, theta.len())?;
    check_dim(d, cache.dim())?;
    cache.check_fingerprint(contrib.fingerprint())?;
    if cache.n != contrib.n_obs() {
        return Err(VbillError::DimensionMismatch {
            expected: cache.n,
            found: contrib.n_obs(),
        });
    }
    let total_size: usize = strata.iter().map(|s| s.size).sum();
    if total_size != cache.n {
        return Err(VbillError::DimensionMismatch {
            expected: cache.n,
            found: total_size,
        });
    }
    let m: usize = strata.iter().map(|s| s.indices.len()).sum();
    if m == 0 {
        return Err(VbillError::InvalidParameter("empty subsample".into()));
    }
    let mut flat = Vec::with_capacity(m);
    for s in strata {
        if s.indices.is_empty() && s.size > 0 {
            return Err(VbillError::InvalidParameter(
                "every non-empty stratum needs at least one subsampled index".into(),
            ));
        }
        let scale = s.size as f64 / s.indices.len().max(1) as f64;
        for &u in &s.indices {
            if u >= cache.n {
                return Err(VbillError::IndexOutOfRange { index: u, n: cache.n });
            }
            flat.push((u, scale));
        }
    }

    let delta = sub(theta, &cache.theta_bar);
    let residuals = par::try_map_indices(flat.len(), |j| {
        residual(contrib, flat[j].0, theta, &delta, cache, key.child(j as u64))
    })?;

    let mut grad = cache.linear_term(theta);
    let mut loglik = cache.quadratic_term(theta);
    let mut terms = Vec::with_capacity(flat.len());
    for ((_, scale), (dg, dl)) in flat.iter().zip(&residuals) {
        axpy(*scale, dg, &mut grad);
        loglik += scale * dl;
        terms.push(dg.iter().map(|v| v * scale * m as f64).collect::<Vec<f64>>());
    }
    let sample_variance = column_variance(&terms, d);
    Ok(DrawEstimate {
        gradient: GradientEstimate {
            value: grad,
            m,
            sample_variance,
        },
        loglik,
    })
}

fn column_variance(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let n = rows.len();
    if n < 2 {
        return vec![0.0; d];
    }
    (0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
        })
        .collect()
}

fn single_stratum(cache: &ControlVariateCache, plan: &SubsamplePlan) -> [Stratum; 1] {
    [Stratum {
        size: cache.n,
        indices: plan.indices.clone(),
    }]
}

/// Both estimates for one plan.
pub fn estimate<C: Contributions + ?Sized>(
    contrib: &C,
    theta: &[f64],
    cache: &ControlVariateCache,
    plan: &SubsamplePlan,
    key: StreamKey,
) -> Result<DrawEstimate> {
    estimate_stratified(contrib, theta, cache, &single_stratum(cache, plan), key)
}

pub fn estimate_gradient<C: Contributions + ?Sized>(
    contrib: &C,
    theta: &[f64],
    cache: &ControlVariateCache,
    plan: &SubsamplePlan,
    key: StreamKey,
) -> Result<GradientEstimate> {
    Ok(estimate(contrib, theta, cache, plan, key)?.gradient)
}

pub fn estimate_loglik<C: Contributions + ?Sized>(
    contrib: &C,
    theta: &[f64],
    cache: &ControlVariateCache,
    plan: &SubsamplePlan,
    key: StreamKey,
) -> Result<f64> {
    Ok(estimate(contrib, theta, cache, plan, key)?.loglik)
}

/// Subsample sizes per stratum, proportional to stratum size, rounded, with
/// the rounding remainder assigned to the largest stratum. Every non-empty
/// stratum receives at least one index.
pub fn allocate(sizes: &[usize], m: usize) -> Result<Vec<usize>> {
    let n: usize = sizes.iter().sum();
    let nonempty = sizes.iter().filter(|&&s| s > 0).count();
    if m < nonempty {
        return Err(VbillError::InvalidParameter(format!(
            "subsample size {m} is smaller than the number of chunks {nonempty}"
        )));
    }
    let mut alloc: Vec<usize> = sizes
        .iter()
        .map(|&s| {
            if s == 0 {
                0
            } else {
                ((s as f64 * m as f64 / n as f64).round() as usize).max(1)
            }
        })
        .collect();
    let largest = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let assigned: usize = alloc.iter().sum();
    if assigned > m {
        let excess = assigned - m;
        if alloc[largest] <= excess {
            return Err(VbillError::InvalidParameter(format!(
                "cannot allocate a subsample of {m} over the chunks"
            )));
        }
        alloc[largest] -= excess;
    } else {
        alloc[largest] += m - assigned;
    }
    Ok(alloc)
}

/// Draws per-stratum plans for strata laid out contiguously in index order.
pub fn draw_strata(sizes: &[usize], m: usize, key: StreamKey) -> Result<Vec<Stratum>> {
    let alloc = allocate(sizes, m)?;
    let mut offset = 0;
    let mut strata = Vec::with_capacity(sizes.len());
    for (k, (&size, &mk)) in sizes.iter().zip(&alloc).enumerate() {
        let mut rng = key.child(k as u64).rng();
        let indices = (0..mk).map(|_| offset + rng.random_range(0..size)).collect();
        strata.push(Stratum { size, indices });
        offset += size;
    }
    Ok(strata)
}

/// Source of per-draw gradient and log-likelihood estimates for the optimizer.
pub trait GradientEstimator: Send + Sync {
    fn dim(&self) -> usize;
    /// Number of observations (used to scale the lower bound).
    fn n_obs(&self) -> usize;
    fn estimate(&self, theta: &[f64], key: StreamKey) -> Result<DrawEstimate>;
}

/// Subsampled difference estimator with a fresh plan per call.
pub struct SubsampledEstimator<'a, C: ?Sized> {
    pub contrib: &'a C,
    pub cache: ControlVariateCache,
    pub m: usize,
    /// Optional per-stratum layout (chunk sizes in index order).
    pub strata: Option<Vec<usize>>,
}

impl<'a, C: Contributions + ?Sized> SubsampledEstimator<'a, C> {
    pub fn new(contrib: &'a C, cache: ControlVariateCache, m: usize) -> Result<Self> {
        cache.check_fingerprint(contrib.fingerprint())?;
        if m == 0 {
            return Err(VbillError::InvalidParameter("subsample size must be positive".into()));
        }
        Ok(SubsampledEstimator {
            contrib,
            cache,
            m,
            strata: None,
        })
    }

    pub fn with_strata(mut self, sizes: Vec<usize>) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        check_dim(self.cache.n, total)?;
        allocate(&sizes, self.m)?;
        self.strata = Some(sizes);
        Ok(self)
    }
}

impl<C: Contributions + ?Sized> GradientEstimator for SubsampledEstimator<'_, C> {
    fn dim(&self) -> usize {
        self.contrib.dim()
    }

    fn n_obs(&self) -> usize {
        self.cache.n
    }

    fn estimate(&self, theta: &[f64], key: StreamKey) -> Result<DrawEstimate> {
        let strata = match &self.strata {
            Some(sizes) => draw_strata(sizes, self.m, key.child(0))?,
            None => {
                let plan = SubsamplePlan::draw(self.cache.n, self.m, key.child(0))?;
                single_stratum(&self.cache, &plan).to_vec()
            }
        };
        estimate_stratified(self.contrib, theta, &self.cache, &strata, key.child(1))
    }
}

/// Full-data gradient and log-likelihood of a tractable model.
pub struct ExactEstimator<'a, M: ?Sized> {
    pub model: &'a M,
}

impl<M: Model + ?Sized> GradientEstimator for ExactEstimator<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn n_obs(&self) -> usize {
        self.model.n_obs()
    }

    fn estimate(&self, theta: &[f64], _key: StreamKey) -> Result<DrawEstimate> {
        let d = self.model.dim();
        let n = self.model.n_obs();
        let blocks = par::blocks(n);
        let partials = par::try_map_indices(blocks.len(), |b| {
            let mut g = vec![0.0; d];
            let mut gi = vec![0.0; d];
            let mut l = 0.0;
            for i in blocks[b].clone() {
                self.model.grad_contrib_into(i, theta, &mut gi)?;
                axpy(1.0, &gi, &mut g);
                l += self.model.loglik_contrib(i, theta)?;
            }
            Ok::<_, VbillError>((g, l))
        })?;
        let mut g = vec![0.0; d];
        let mut l = 0.0;
        for (pg, pl) in &partials {
            axpy(1.0, pg, &mut g);
            l += pl;
        }
        Ok(DrawEstimate {
            gradient: GradientEstimate {
                value: g,
                m: n,
                sample_variance: vec![0.0; d],
            },
            loglik: l,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConjugateGaussianModel, LogisticRegressionModel};

    fn small_logistic(n: usize, seed: u64) -> LogisticRegressionModel {
        let mut rng = StreamKey::new(seed).rng();
        let design = (0..n)
            .map(|_| {
                vec![
                    1.0,
                    f64::from(rng.random_bool(0.25) as u8),
                    f64::from(rng.random_bool(2.0 / 7.0) as u8),
                    rng.random::<f64>(),
                ]
            })
            .collect();
        let y = (0..n).map(|i| f64::from((i % 3 == 0) as u8)).collect();
        LogisticRegressionModel::new(design, y).unwrap()
    }

    fn full_data(model: &LogisticRegressionModel, theta: &[f64]) -> (Vec<f64>, f64) {
        let est = ExactEstimator { model }.estimate(theta, StreamKey::new(0)).unwrap();
        (est.gradient.value, est.loglik)
    }

    /// Every ordered plan of length `m` over `0..n`.
    fn all_plans(n: usize, m: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..m {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..n).map(move |i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn conjugate_cache_and_exactness() {
        let obs = vec![vec![0.5, -1.0], vec![1.5, 0.2], vec![-0.3, 0.9]];
        let m = ConjugateGaussianModel::new(obs.clone(), 2).unwrap();
        let tb = [0.1, 0.2];
        let cache = build_control_variates(&m, &tb).unwrap();
        let a = [
            obs.iter().map(|y| y[0] - 0.1).sum::<f64>(),
            obs.iter().map(|y| y[1] - 0.2).sum::<f64>(),
        ];
        assert_close(&cache.grad_bar, &a, 1e-15);
        assert_eq!(cache.hess_bar, vec![-3.0, 0.0, 0.0, -3.0]);
        let theta = [0.7, -0.4];
        let exact = ExactEstimator { model: &m }.estimate(&theta, StreamKey::new(0)).unwrap();
        for seed in 0..5 {
            let plan = SubsamplePlan::draw(3, 2, StreamKey::new(seed)).unwrap();
            let est = estimate(&m, &theta, &cache, &plan, StreamKey::new(seed)).unwrap();
            assert_close(&est.gradient.value, &exact.gradient.value, 1e-12);
            assert!((est.loglik - exact.loglik).abs() < 1e-12);
        }
    }

    #[test]
    fn center_value_returns_cache() {
        let m = small_logistic(10, 3);
        let tb = [0.2, -0.1, 0.3, -0.5];
        let cache = build_control_variates(&m, &tb).unwrap();
        let plan = SubsamplePlan::draw(10, 4, StreamKey::new(1)).unwrap();
        let est = estimate(&m, &tb, &cache, &plan, StreamKey::new(1)).unwrap();
        assert_eq!(est.gradient.value, cache.grad_bar);
        assert_eq!(est.loglik, cache.loglik_bar);

        // brute-force sums in one pass
        let mut g = vec![0.0; 4];
        let mut h = vec![0.0; 16];
        let mut l = 0.0;
        for i in 0..10 {
            l += m.loglik_contrib(i, &tb).unwrap();
            axpy(1.0, &m.grad_contrib(i, &tb).unwrap(), &mut g);
            axpy(1.0, &m.hess_contrib(i, &tb).unwrap(), &mut h);
        }
        assert_close(&cache.grad_bar, &g, 1e-14);
        assert_close(&cache.hess_bar, &h, 1e-14);
        assert!((cache.loglik_bar - l).abs() < 1e-13);
    }

    #[test]
    fn enumeration_unbiasedness_n6_m2() {
        let m = small_logistic(6, 7);
        let tb = [0.1, 0.2, -0.3, 0.4];
        let theta = [-0.6, 0.9, 0.5, -1.2];
        let cache = build_control_variates(&m, &tb).unwrap();
        let plans = all_plans(6, 2);
        assert_eq!(plans.len(), 36);
        let mut g = vec![0.0; 4];
        let mut l = 0.0;
        for p in &plans {
            let plan = SubsamplePlan::new(p.clone(), 6).unwrap();
            let est = estimate(&m, &theta, &cache, &plan, StreamKey::new(0)).unwrap();
            axpy(1.0 / 36.0, &est.gradient.value, &mut g);
            l += est.loglik / 36.0;
        }
        let (fg, fl) = full_data(&m, &theta);
        assert_close(&g, &fg, 1e-12);
        assert!((l - fl).abs() < 1e-12 * (1.0 + fl.abs()));
    }

    #[test]
    fn enumeration_unbiasedness_small_grid() {
        for n in 1..=8usize {
            for mm in 1..=3usize {
                let m = small_logistic(n, 100 + n as u64);
                let tb = [0.3, -0.2, 0.1, 0.0];
                let theta = [1.0, -0.5, 0.25, 0.8];
                let cache = build_control_variates(&m, &tb).unwrap();
                let plans = all_plans(n, mm);
                let w = 1.0 / plans.len() as f64;
                let mut g = vec![0.0; 4];
                let mut l = 0.0;
                for p in plans {
                    let plan = SubsamplePlan::new(p, n).unwrap();
                    let est = estimate(&m, &theta, &cache, &plan, StreamKey::new(0)).unwrap();
                    axpy(w, &est.gradient.value, &mut g);
                    l += w * est.loglik;
                }
                let (fg, fl) = full_data(&m, &theta);
                assert_close(&g, &fg, 1e-12);
                assert!((l - fl).abs() < 1e-12 * (1.0 + fl.abs()));
            }
        }
    }

    #[test]
    fn enumeration_unbiasedness_three_strata() {
        let m = small_logistic(12, 9);
        let tb = [0.0, 0.1, 0.2, 0.3];
        let theta = [0.5, -1.0, 0.7, 0.2];
        let cache = build_control_variates(&m, &tb).unwrap();
        let mut g = vec![0.0; 4];
        let mut l = 0.0;
        let mut count = 0;
        for a in 0..4 {
            for b in 4..8 {
                for c in 8..12 {
                    let strata: Vec<Stratum> = [a, b, c]
                        .iter()
                        .map(|&u| Stratum { size: 4, indices: vec![u] })
                        .collect();
                    let est = estimate_stratified(&m, &theta, &cache, &strata, StreamKey::new(0)).unwrap();
                    axpy(1.0, &est.gradient.value, &mut g);
                    l += est.loglik;
                    count += 1;
                }
            }
        }
        g.iter_mut().for_each(|v| *v /= count as f64);
        l /= count as f64;
        let (fg, fl) = full_data(&m, &theta);
        assert_close(&g, &fg, 1e-12);
        assert!((l - fl).abs() < 1e-12 * (1.0 + fl.abs()));
    }

    #[test]
    fn one_stratum_equals_plain_plan() {
        let m = small_logistic(20, 4);
        let tb = [0.0; 4];
        let theta = [0.3, 0.3, -0.3, 0.1];
        let cache = build_control_variates(&m, &tb).unwrap();
        let plan = SubsamplePlan::draw(20, 5, StreamKey::new(8)).unwrap();
        let a = estimate(&m, &theta, &cache, &plan, StreamKey::new(2)).unwrap();
        let b = estimate_stratified(
            &m,
            &theta,
            &cache,
            &[Stratum { size: 20, indices: plan.indices.clone() }],
            StreamKey::new(2),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn allocation_rules() {
        assert_eq!(allocate(&[4, 4, 2], 5).unwrap().iter().sum::<usize>(), 5);
        assert_eq!(allocate(&[100, 100, 100, 100], 20).unwrap(), vec![5, 5, 5, 5]);
        assert_eq!(allocate(&[1000, 500, 10], 30).unwrap(), vec![19, 10, 1]);
        assert!(allocate(&[3, 3, 3], 2).is_err());
    }

    #[test]
    fn rejects_bad_plans_and_fingerprints() {
        let m = small_logistic(6, 1);
        let cache = build_control_variates(&m, &[0.0; 4]).unwrap();
        assert!(SubsamplePlan::new(vec![0, 6], 6).is_err());
        let other = small_logistic(6, 2);
        let plan = SubsamplePlan::new(vec![0, 1], 6).unwrap();
        assert!(matches!(
            estimate(&other, &[0.0; 4], &cache, &plan, StreamKey::new(0)),
            Err(VbillError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn cache_round_trips_through_binary_file() {
        let m = small_logistic(30, 5);
        let cache = build_control_variates(&m, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        cache.write_to(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 * (3 + 4 + 1 + 4 + 16));
        assert_eq!(ControlVariateCache::read_from(&path).unwrap(), cache);
        std::fs::write(&path, [0u8; 20]).unwrap();
        assert!(ControlVariateCache::read_from(&path).is_err());
    }

    #[test]
    fn estimates_are_deterministic() {
        let m = small_logistic(50, 6);
        let cache = build_control_variates(&m, &[0.0; 4]).unwrap();
        let est = SubsampledEstimator::new(&m, cache, 10).unwrap();
        let a = est.estimate(&[0.1, 0.2, 0.3, 0.4], StreamKey::new(4)).unwrap();
        let b = est.estimate(&[0.1, 0.2, 0.3, 0.4], StreamKey::new(4)).unwrap();
        assert_eq!(a, b);
        let c = est.estimate(&[0.1, 0.2, 0.3, 0.4], StreamKey::new(5)).unwrap();
        assert_ne!(a, c);
    }
}
