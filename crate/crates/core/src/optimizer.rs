//! Stochastic natural-gradient ascent on the lower bound, its
//! initialization from a subsample maximum-likelihood fit, and the
//! moving-window stopping rule.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, VbillError};
use crate::fisher_identity::{ISConfig, SimulatedLikelihood};
use crate::linalg::{all_finite, norm};
use crate::model::{full_derivatives, LatentModel, Model};
use crate::natgrad::natural_gradient;
use crate::par;
use crate::stream::StreamKey;
use crate::subsample::GradientEstimator;
use crate::variational::{
    lb_gradient_estimate, lower_bound_estimate, DrawBatch, LowerBoundEstimate, PointSource,
    PriorSpec, VariationalParams,
};

/// `a_t = a0 * decay / (decay + t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRate {
    pub a0: f64,
    pub decay: f64,
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate { a0: 0.1, decay: 50.0 }
    }
}

impl LearningRate {
    pub fn at(&self, t: usize) -> f64 {
        self.a0 * self.decay / (self.decay + t as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    /// Inverse Fisher information of the variational family.
    Natural,
    /// Plain gradient steps.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Change of the windowed mean of the scaled lower bound.
    LowerBound,
    /// Change of the windowed mean of the variational parameters; the
    /// returned parameters are the window average.
    ParameterAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Draws `S` per iteration.
    pub draws: usize,
    pub learning_rate: LearningRate,
    /// Stopping window `K`.
    pub window: usize,
    pub eps_stop: f64,
    pub max_iterations: usize,
    pub source: PointSource,
    pub seed: u64,
    pub preconditioner: Preconditioner,
    pub stop_rule: StopRule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            draws: 256,
            learning_rate: LearningRate::default(),
            window: 5,
            eps_stop: 1e-7,
            max_iterations: 1000,
            source: PointSource::Rqmc,
            seed: 0,
            preconditioner: Preconditioner::Natural,
            stop_rule: StopRule::LowerBound,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(VbillError::InvalidParameter("draws must be positive".into()));
        }
        if self.source == PointSource::Rqmc && !self.draws.is_power_of_two() {
            return Err(VbillError::InvalidParameter(format!(
                "RQMC needs a power-of-two number of draws, got {}",
                self.draws
            )));
        }
        if self.window == 0 || !(self.eps_stop > 0.0) {
            return Err(VbillError::InvalidParameter(
                "stopping window must be >= 1 and threshold > 0".into(),
            ));
        }
        if !(self.learning_rate.a0 > 0.0 && self.learning_rate.decay > 0.0) {
            return Err(VbillError::InvalidParameter(
                "learning-rate constants must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Gradient of the lower bound and the lower-bound estimate at `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationEstimate {
    /// Stacked `(mu, B, c)` gradient.
    pub gradient: Vec<f64>,
    /// Unscaled lower-bound estimate.
    pub lower_bound: f64,
}

/// Anything that can estimate the lower bound and its gradient.
pub trait LowerBoundOracle: Sync {
    fn dim(&self) -> usize;
    /// Dataset size used to scale the lower bound.
    fn n_obs(&self) -> usize;
    fn evaluate(&self, lambda: &VariationalParams, key: StreamKey) -> Result<IterationEstimate>;
}

/// Reparameterization estimator: `S` draws, one log-likelihood gradient
/// estimate per draw. The same draws give the lower-bound estimate.
pub struct ReparamOracle<'a, E: ?Sized> {
    pub estimator: &'a E,
    pub prior: PriorSpec,
    pub draws: usize,
    pub source: PointSource,
}

impl<E: GradientEstimator + ?Sized> LowerBoundOracle for ReparamOracle<'_, E> {
    fn dim(&self) -> usize {
        self.estimator.dim()
    }

    fn n_obs(&self) -> usize {
        self.estimator.n_obs()
    }

    fn evaluate(&self, lambda: &VariationalParams, key: StreamKey) -> Result<IterationEstimate> {
        let d = lambda.dim();
        check_dim(self.estimator.dim(), d)?;
        let batch = DrawBatch::generate(self.draws, d, self.source, key.child(0))?;
        let thetas = batch.thetas(lambda)?;
        let draw_key = key.child(1);
        let estimates = par::try_map_indices(thetas.len(), |s| {
            self.estimator.estimate(&thetas[s], draw_key.child(s as u64))
        })?;
        let grads: Vec<Vec<f64>> = estimates.iter().map(|e| e.gradient.value.clone()).collect();
        let logliks: Vec<f64> = estimates.iter().map(|e| e.loglik).collect();
        let gradient = lb_gradient_estimate(lambda, &batch, &grads, &self.prior)?;
        let lb = lower_bound_estimate(lambda, &logliks, &self.prior, self.n_obs(), 0)?;
        Ok(IterationEstimate {
            gradient,
            lower_bound: lb.value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub lambda: VariationalParams,
    pub lower_bound: LowerBoundEstimate,
    pub gradient_norm: f64,
    pub step_norm: f64,
    pub learning_rate: f64,
    /// Seconds since the start of the fit.
    pub elapsed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub lambda: VariationalParams,
    pub trace: Vec<TracePoint>,
    pub status: FitStatus,
    /// Number of lower-bound evaluations performed.
    pub iterations: usize,
}

/// A fit that stopped on an error, with the trace up to that point.
#[derive(Debug)]
pub struct FitAbort {
    pub error: VbillError,
    pub trace: Vec<TracePoint>,
}

impl std::fmt::Display for FitAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.trace.len())
    }
}

impl std::error::Error for FitAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<FitAbort> for VbillError {
    fn from(a: FitAbort) -> Self {
        a.error
    }
}

/// True when the windowed means of the scaled lower bound over the last `K`
/// and the preceding `K` trace points differ by less than `eps`.
pub fn stopping_check(trace: &[TracePoint], window: usize, eps: f64) -> bool {
    let values: Vec<f64> = trace.iter().map(|p| p.lower_bound.scaled_value).collect();
    window_change(&values, window).is_some_and(|c| c < eps)
}

fn window_change(values: &[f64], k: usize) -> Option<f64> {
    if k == 0 || values.len() < 2 * k {
        return None;
    }
    let n = values.len();
    let last = values[n - k..].iter().sum::<f64>() / k as f64;
    let prev = values[n - 2 * k..n - k].iter().sum::<f64>() / k as f64;
    Some((last - prev).abs())
}

fn parameter_average(trace: &[TracePoint], from: usize, k: usize) -> Vec<f64> {
    let mut acc = vec![0.0; trace[0].lambda.stacked_len()];
    for p in &trace[from..from + k] {
        crate::linalg::axpy(1.0 / k as f64, &p.lambda.to_stacked(), &mut acc);
    }
    acc
}

fn parameter_stop(trace: &[TracePoint], k: usize, eps: f64) -> bool {
    let n = trace.len();
    if n < 2 * k {
        return false;
    }
    let last = parameter_average(trace, n - k, k);
    let prev = parameter_average(trace, n - 2 * k, k);
    last.iter()
        .zip(&prev)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        < eps
}

/// Runs the ascent from `init` until the stopping rule fires or the
/// iteration budget is spent. Iteration `t` draws its randomness from
/// `StreamKey::new(seed).child(t)`.
pub fn vbill_fit<O: LowerBoundOracle + ?Sized>(
    oracle: &O,
    init: VariationalParams,
    config: &OptimizerConfig,
) -> std::result::Result<FitResult, FitAbort> {
    let mut trace: Vec<TracePoint> = Vec::new();
    let abort = |error: VbillError, trace: Vec<TracePoint>| FitAbort { error, trace };
    if let Err(e) = config.validate().and_then(|_| init.validate()) {
        return Err(abort(e, trace));
    }
    if let Err(e) = check_dim(oracle.dim(), init.dim()) {
        return Err(abort(e, trace));
    }
    let master = StreamKey::new(config.seed);
    let start = Instant::now();
    let n = oracle.n_obs();
    let d = init.dim();
    let mut lambda = init;
    for t in 0..config.max_iterations {
        let est = match oracle.evaluate(&lambda, master.child(t as u64)) {
            Ok(e) => e,
            Err(e) => return Err(abort(e, trace)),
        };
        if !all_finite(&est.gradient) || !est.lower_bound.is_finite() {
            return Err(abort(
                VbillError::non_finite(format!("lower-bound gradient at iteration {t}")),
                trace,
            ));
        }
        let step = match config.preconditioner {
            Preconditioner::Natural => match natural_gradient(&lambda, &est.gradient) {
                Ok(s) => s,
                Err(e) => return Err(abort(e, trace)),
            },
            Preconditioner::Identity => est.gradient.clone(),
        };
        let rate = config.learning_rate.at(t);
        trace.push(TracePoint {
            iteration: t,
            lambda: lambda.clone(),
            lower_bound: LowerBoundEstimate {
                value: est.lower_bound,
                scaled_value: est.lower_bound / n.max(1) as f64,
                iteration: t,
            },
            gradient_norm: norm(&est.gradient),
            step_norm: rate * norm(&step),
            learning_rate: rate,
            elapsed: start.elapsed().as_secs_f64(),
        });
        let stop = match config.stop_rule {
            StopRule::LowerBound => stopping_check(&trace, config.window, config.eps_stop),
            StopRule::ParameterAverage => parameter_stop(&trace, config.window, config.eps_stop),
        };
        if stop {
            let lambda = match config.stop_rule {
                StopRule::LowerBound => lambda,
                StopRule::ParameterAverage => {
                    let avg = parameter_average(&trace, trace.len() - config.window, config.window);
                    VariationalParams::from_stacked(&avg, d).expect("stacked length matches")
                }
            };
            let iterations = trace.len();
            return Ok(FitResult {
                lambda,
                trace,
                status: FitStatus::Converged,
                iterations,
            });
        }
        let mut next = lambda.to_stacked();
        crate::linalg::axpy(rate, &step, &mut next);
        let next = VariationalParams::from_stacked(&next, d).expect("stacked length matches");
        if let Err(e) = next.validate() {
            return Err(abort(e, trace));
        }
        if next.c == 0.0 {
            return Err(abort(
                VbillError::InvalidParameter(format!("scale c reached 0 at iteration {t}")),
                trace,
            ));
        }
        lambda = next;
    }
    let iterations = trace.len();
    Ok(FitResult {
        lambda,
        trace,
        status: FitStatus::MaxIterations,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Initialization

/// A smooth objective with analytic gradient and Hessian.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    /// Value, gradient and row-major Hessian.
    fn value_grad_hess(&self, theta: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)>;
}

/// Log-likelihood of a tractable model restricted to a set of indices.
pub struct SubsetLikelihood<'a, M: ?Sized> {
    pub model: &'a M,
    pub indices: Vec<usize>,
}

impl<M: Model + ?Sized> Objective for SubsetLikelihood<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn value_grad_hess(&self, theta: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        full_derivatives(self.model, &self.indices, theta)
    }
}

impl<L: LatentModel + ?Sized> Objective for SimulatedLikelihood<'_, L> {
    fn dim(&self) -> usize {
        LatentModel::dim(self.model())
    }

    fn value_grad_hess(&self, theta: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        SimulatedLikelihood::value_grad_hess(self, theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub theta: Vec<f64>,
    /// Row-major observed information `-H(theta_hat)`.
    pub information: Vec<f64>,
    pub iterations: usize,
    /// True when the information needed a ridge to become positive definite.
    pub repaired: bool,
}

pub const NEWTON_MAX_ITERATIONS: usize = 100;
pub const NEWTON_GRAD_TOL: f64 = 1e-8;

/// Newton ascent with step halving. Converges when the gradient norm drops
/// below `1e-8` and the last Newton step is negligible.
pub fn newton_maximize<O: Objective + ?Sized>(obj: &O, theta0: &[f64]) -> Result<MleResult> {
    let d = obj.dim();
    check_dim(d, theta0.len())?;
    let mut theta = theta0.to_vec();
    let (mut f, mut g, mut h) = obj.value_grad_hess(&theta)?;
    for it in 0..NEWTON_MAX_ITERATIONS {
        if !f.is_finite() || !all_finite(&g) {
            return Err(VbillError::non_finite(format!("objective at Newton iteration {it}")));
        }
        let neg_h = DMatrix::from_row_slice(d, d, &h).map(|v| -v);
        let mut newton = true;
        let dir = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&DVector::from_column_slice(&g)),
            None => {
                newton = false;
                // indefinite or singular curvature: regularized ascent step
                let scale = neg_h.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
                match (neg_h + DMatrix::identity(d, d) * scale).cholesky() {
                    Some(ch) => ch.solve(&DVector::from_column_slice(&g)),
                    None => DVector::from_column_slice(&g) / scale,
                }
            }
        };
        let dir: Vec<f64> = dir.iter().copied().collect();
        let step_norm = norm(&dir);
        if newton && norm(&g) < NEWTON_GRAD_TOL && step_norm < 1e-6 * (1.0 + norm(&theta)) {
            return finish(theta, h, it);
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            if let Ok((fc, gc, hc)) = obj.value_grad_hess(&cand) {
                if fc.is_finite() && fc >= f - 1e-12 * f.abs().max(1.0) {
                    theta = cand;
                    f = fc;
                    g = gc;
                    h = hc;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if norm(&g) < NEWTON_GRAD_TOL {
        let neg_h = DMatrix::from_row_slice(d, d, &h).map(|v| -v);
        if let Some(ch) = neg_h.cholesky() {
            let dir = ch.solve(&DVector::from_column_slice(&g));
            if dir.norm() < 1e-6 * (1.0 + norm(&theta)) {
                return finish(theta, h, NEWTON_MAX_ITERATIONS);
            }
        }
    }
    Err(VbillError::NonConvergence {
        iterations: NEWTON_MAX_ITERATIONS,
        last: theta,
    })
}

fn finish(theta: Vec<f64>, hess: Vec<f64>, iterations: usize) -> Result<MleResult> {
    let d = theta.len();
    let mut info: Vec<f64> = hess.iter().map(|v| -v).collect();
    // symmetrize
    for a in 0..d {
        for b in a + 1..d {
            let v = 0.5 * (info[a * d + b] + info[b * d + a]);
            info[a * d + b] = v;
            info[b * d + a] = v;
        }
    }
    let (information, repaired) = ridge_repair(info, d)?;
    Ok(MleResult {
        theta,
        information,
        iterations,
        repaired,
    })
}

/// Adds `1e-6 * trace/d * I` when the matrix is not positive definite.
pub fn ridge_repair(mut info: Vec<f64>, d: usize) -> Result<(Vec<f64>, bool)> {
    if DMatrix::from_row_slice(d, d, &info).cholesky().is_some() {
        return Ok((info, false));
    }
    let tr: f64 = (0..d).map(|i| info[i * d + i]).sum();
    let ridge = 1e-6 * (tr / d as f64).abs().max(f64::MIN_POSITIVE);
    log::warn!("observed information is not positive definite; adding ridge {ridge:e}");
    for i in 0..d {
        info[i * d + i] += ridge;
    }
    if DMatrix::from_row_slice(d, d, &info).cholesky().is_none() {
        return Err(VbillError::NotPositiveDefinite(
            "observed information after ridge repair".into(),
        ));
    }
    Ok((info, true))
}

/// Maximum-likelihood fit of a tractable model on a subset of observations.
pub fn subsample_mle<M: Model + ?Sized>(model: &M, indices: &[usize], theta0: &[f64]) -> Result<MleResult> {
    if indices.is_empty() {
        return Err(VbillError::Empty("initialization subset"));
    }
    newton_maximize(
        &SubsetLikelihood {
            model,
            indices: indices.to_vec(),
        },
        theta0,
    )
}

/// Simulated maximum likelihood for a panel model on a subset of panels.
///
/// Proposals are fixed at an anchor and the innovations are common random
/// numbers, so each round maximizes a smooth function; the anchor is then
/// moved to the new estimate and the fit repeated.
pub fn simulated_mle<L: LatentModel + ?Sized>(
    model: &L,
    panels: &[usize],
    theta0: &[f64],
    config: &ISConfig,
    key: StreamKey,
) -> Result<MleResult> {
    if panels.is_empty() {
        return Err(VbillError::Empty("initialization subset"));
    }
    let mut anchor = theta0.to_vec();
    let mut result = None;
    for _ in 0..4 {
        let sim = SimulatedLikelihood::new(model, panels.to_vec(), &anchor, config, key)?;
        let r = newton_maximize(&sim, &anchor)?;
        let moved = norm(&crate::linalg::sub(&r.theta, &anchor));
        anchor = r.theta.clone();
        result = Some(r);
        if moved < 1e-3 {
            break;
        }
    }
    Ok(result.expect("at least one round"))
}

/// Initial variational parameters from an MLE and its observed information
/// on `n_sub` of `n` observations: `Sigma = ((n / n_sub) I)^{-1}`,
/// `B = sqrt(nu_1) v_1`, `c^2 = mean(diag(Sigma - BB'))`.
///
/// For `d = 1` the variance is split evenly between `B^2` and `c^2`.
pub fn init_lambda(
    theta_hat: &[f64],
    information: &[f64],
    n: usize,
    n_sub: usize,
) -> Result<VariationalParams> {
    let d = theta_hat.len();
    check_dim(d * d, information.len())?;
    if n_sub == 0 {
        return Err(VbillError::Empty("initialization subset"));
    }
    let scale = n as f64 / n_sub as f64;
    let info = DMatrix::from_row_slice(d, d, information) * scale;
    let chol = info
        .cholesky()
        .ok_or_else(|| VbillError::NotPositiveDefinite("observed information".into()))?;
    let sigma = chol.inverse();
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let eig = sigma.clone().symmetric_eigen();
    let (imax, nu1) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    if d == 1 {
        let half = (sigma[(0, 0)] / 2.0).sqrt();
        return VariationalParams::new(theta_hat.to_vec(), vec![half], half);
    }
    let v1 = eig.eigenvectors.column(imax);
    // fix the sign so the largest-magnitude entry is positive
    let pivot = v1.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
    let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
    let b: Vec<f64> = v1.iter().map(|v| sign * nu1.sqrt() * v).collect();
    let c2 = (sigma.trace() - nu1) / d as f64;
    VariationalParams::new(theta_hat.to_vec(), b, c2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConjugateGaussianModel, LogisticRegressionModel};
    use crate::subsample::ExactEstimator;
    use crate::natgrad::fisher_matrix;
    use crate::variational::{grad_a, prior_term_a};
    use rand::Rng;

    fn point(t: usize, scaled: f64) -> TracePoint {
        TracePoint {
            iteration: t,
            lambda: VariationalParams::new(vec![0.0], vec![1.0], 1.0).unwrap(),
            lower_bound: LowerBoundEstimate {
                value: scaled,
                scaled_value: scaled,
                iteration: t,
            },
            gradient_norm: 0.0,
            step_norm: 0.0,
            learning_rate: 0.0,
            elapsed: 0.0,
        }
    }

    #[test]
    fn stopping_rule_examples() {
        let constant: Vec<TracePoint> = (0..10).map(|t| point(t, -0.7)).collect();
        assert!(!stopping_check(&constant[..9], 5, 1e-7));
        assert!(stopping_check(&constant, 5, 1e-7));
        for slope in [1e-9, 1e-8, 3e-8] {
            let tr: Vec<TracePoint> = (0..10).map(|t| point(t, -1.0 + slope * t as f64)).collect();
            // windowed means differ by K * slope
            assert_eq!(stopping_check(&tr, 5, 1e-7), 5.0 * slope < 1e-7);
        }
    }

    #[test]
    fn learning_rate_is_robbins_monro() {
        let lr = LearningRate::default();
        assert_eq!(lr.at(0), 0.1);
        assert!((lr.at(50) - 0.05).abs() < 1e-15);
        // partial sums grow like log t while squared sums stay bounded by
        // a0^2 * decay^2 * (1/decay + 1/decay^2 ...) <= a0^2 * (decay + 1)
        let bound = lr.a0 * lr.a0 * (lr.decay + 1.0);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut checkpoints = vec![];
        for t in 0..1_000_000 {
            let a = lr.at(t);
            assert!(a > 0.0);
            s1 += a;
            s2 += a * a;
            if [999, 9_999, 99_999, 999_999].contains(&t) {
                checkpoints.push(s1);
            }
        }
        assert!(s2 < bound);
        // each decade adds about a0 * decay * ln 10
        for w in checkpoints.windows(2) {
            assert!(w[1] - w[0] > 0.9 * lr.a0 * lr.decay * 10f64.ln());
        }
    }

    #[test]
    fn init_examples() {
        let l = init_lambda(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 1, 1).unwrap();
        assert!((crate::linalg::norm(&l.b) - 1.0).abs() < 1e-12);
        assert!((l.c - 0.5f64.sqrt()).abs() < 1e-12);

        // Sigma = diag(4, 1)
        let l = init_lambda(&[1.0, 2.0], &[0.25, 0.0, 0.0, 1.0], 1, 1).unwrap();
        assert!((l.b[0] - 2.0).abs() < 1e-12 && l.b[1].abs() < 1e-12);
        assert!((l.c - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(l.mu, vec![1.0, 2.0]);

        // information scaling by n / n_sub
        let l = init_lambda(&[0.0, 0.0], &[0.25, 0.0, 0.0, 1.0], 4, 1).unwrap();
        assert!((l.b[0] - 1.0).abs() < 1e-12);

        assert!(init_lambda(&[0.0, 0.0], &[1.0, 2.0, 2.0, 1.0], 1, 1).is_err());
        let l1 = init_lambda(&[0.3], &[4.0], 1, 1).unwrap();
        assert!((l1.b[0].powi(2) + l1.c.powi(2) - 0.25).abs() < 1e-15);
    }

    /// Frobenius error of `BB' + c^2 I` against `Sigma`.
    fn frob(sigma: &DMatrix<f64>, b: &DVector<f64>, c2: f64) -> f64 {
        let d = sigma.nrows();
        (sigma - b * b.transpose() - DMatrix::identity(d, d) * c2).norm()
    }

    #[test]
    fn init_fit_against_grid_search() {
        let mut rng = StreamKey::new(8).rng();
        for trial in 0..20 {
            let d = 2 + trial % 5;
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 0.2;
            let info = sigma.clone().try_inverse().unwrap();
            let info_rows: Vec<f64> = crate::linalg::from_dmatrix(&info);
            let l = init_lambda(&vec![0.0; d], &info_rows, 1, 1).unwrap();
            let b = DVector::from_column_slice(&l.b);
            let ours = frob(&sigma, &b, l.c * l.c);

            // exhaustive search: for each c^2 on a grid, the best rank-1 term
            // is the top eigenpair of Sigma - c^2 I
            let eig = sigma.clone().symmetric_eigen();
            let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            vals.sort_by(|x, y| y.total_cmp(x));
            let mut best = f64::INFINITY;
            let top = vals[0];
            for k in 0..=20_000 {
                let c2 = top * k as f64 / 20_000.0;
                let rest: f64 = vals[1..].iter().map(|v| (v - c2).powi(2)).sum();
                let lead = (vals[0] - c2).max(0.0) - (vals[0] - c2);
                best = best.min((rest + lead * lead).sqrt());
            }
            let tail: f64 = vals[1..].iter().sum();
            let tol = tail / ((d * (d - 1)) as f64).sqrt();
            assert!(ours <= best + tol + 1e-9, "d={d}: {ours} > {best} + {tol}");
            // and exactly: ours^2 = best^2 + tail^2 / (d (d-1))
            assert!((ours * ours - best * best - tail * tail / (d * (d - 1)) as f64).abs() < 1e-6 * (1.0 + ours * ours));
            // never worse than dropping the isotropic part
            let rank1 = frob(&sigma, &b, 0.0);
            assert!(ours <= rank1 + 1e-12);
        }
    }

    #[test]
    fn conjugate_mle_is_sample_mean() {
        let obs = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let m = ConjugateGaussianModel::new(obs, 2).unwrap();
        let r = subsample_mle(&m, &[0, 1, 2], &[0.0, 0.0]).unwrap();
        assert!((r.theta[0] - 1.5).abs() < 1e-12 && (r.theta[1] - 0.5).abs() < 1e-12);
        assert_eq!(r.information, vec![3.0, 0.0, 0.0, 3.0]);
        assert!(!r.repaired);
    }

    #[test]
    fn separable_logistic_does_not_converge() {
        let design = vec![vec![1.0, -2.0], vec![1.0, -1.0], vec![1.0, 1.0], vec![1.0, 2.0]];
        let m = LogisticRegressionModel::new(design, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let err = subsample_mle(&m, &[0, 1, 2, 3], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, VbillError::NonConvergence { .. }), "{err:?}");
    }

    #[test]
    fn ridge_repair_fixes_semidefinite_information() {
        let (info, repaired) = ridge_repair(vec![1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert!(repaired);
        assert!((info[0] - (1.0 + 1e-6)).abs() < 1e-15);
        assert!(ridge_repair(vec![1.0, 0.0, 0.0, -1.0], 2).is_err());
    }

    /// Closed-form lower bound of the conjugate model.
    struct ConjugateOracle {
        model: ConjugateGaussianModel,
        prior: PriorSpec,
    }

    impl ConjugateOracle {
        fn lower_bound(&self, l: &VariationalParams) -> f64 {
            let d = l.dim();
            let n = Model::n_obs(&self.model);
            let cov = l.covariance();
            let prec = self.model.precision();
            let tr: f64 = (0..d * d).map(|k| prec[k] * cov[k]).sum();
            let expected: f64 = (0..n)
                .map(|i| self.model.loglik_contrib(i, &l.mu).unwrap())
                .sum::<f64>()
                - 0.5 * n as f64 * tr;
            expected + prior_term_a(l, &self.prior).unwrap()
        }
    }

    impl LowerBoundOracle for ConjugateOracle {
        fn dim(&self) -> usize {
            Model::dim(&self.model)
        }
        fn n_obs(&self) -> usize {
            Model::n_obs(&self.model)
        }
        fn evaluate(&self, l: &VariationalParams, _key: StreamKey) -> Result<IterationEstimate> {
            let d = l.dim();
            let n = Model::n_obs(&self.model) as f64;
            let prec = self.model.precision();
            let mut score = vec![0.0; d];
            for i in 0..Model::n_obs(&self.model) {
                crate::linalg::axpy(1.0, &self.model.grad_contrib(i, &l.mu).unwrap(), &mut score);
            }
            let mut pb = vec![0.0; d];
            crate::linalg::mat_vec(prec, &l.b, &mut pb);
            let tr: f64 = (0..d).map(|j| prec[j * d + j]).sum();
            let mut g = grad_a(l, &self.prior)?;
            for j in 0..d {
                g[j] += score[j];
                g[d + j] -= n * pb[j];
            }
            g[2 * d] -= n * l.c * tr;
            Ok(IterationEstimate {
                gradient: g,
                lower_bound: self.lower_bound(l),
            })
        }
    }

    fn conjugate_problem(n: usize) -> ConjugateOracle {
        let mut rng = StreamKey::new(3).rng();
        let obs: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-1.0..2.0), rng.random_range(-1.0..1.0)])
            .collect();
        ConjugateOracle {
            model: ConjugateGaussianModel::with_factor(obs, vec![3.0, 0.0]).unwrap(),
            prior: PriorSpec::new(10.0).unwrap(),
        }
    }

    #[test]
    fn analytic_oracle_gradient_matches_finite_differences() {
        let o = conjugate_problem(4);
        let l = VariationalParams::new(vec![0.3, -0.2], vec![0.5, 0.4], 0.7).unwrap();
        let g = o.evaluate(&l, StreamKey::new(0)).unwrap().gradient;
        let v = l.to_stacked();
        for k in 0..v.len() {
            let mut p = v.clone();
            let mut m = v.clone();
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (o.lower_bound(&VariationalParams::from_stacked(&p, 2).unwrap())
                - o.lower_bound(&VariationalParams::from_stacked(&m, 2).unwrap()))
                / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    fn optimum(o: &ConjugateOracle) -> VariationalParams {
        let mut l = VariationalParams::new(vec![0.0, 0.0], vec![0.3, 0.1], 0.5).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: LearningRate { a0: 0.5, decay: 1e9 },
            max_iterations: 2000,
            eps_stop: 1e-300,
            ..OptimizerConfig::default()
        };
        let r = vbill_fit(o, l.clone(), &cfg).unwrap();
        l = r.lambda;
        l
    }

    #[test]
    fn fixed_point_stops_within_window() {
        let o = conjugate_problem(1);
        let opt = optimum(&o);
        let g = o.evaluate(&opt, StreamKey::new(0)).unwrap().gradient;
        assert!(crate::linalg::norm(&g) < 1e-9);
        let cfg = OptimizerConfig::default();
        let r = vbill_fit(&o, opt, &cfg).unwrap();
        assert_eq!(r.status, FitStatus::Converged);
        assert!(r.iterations <= 2 * cfg.window + 1);
        assert!(r.trace.iter().all(|p| p.step_norm < 1e-9));
    }

    #[test]
    fn identity_preconditioning_is_slower() {
        let o = conjugate_problem(1);
        let opt = optimum(&o);
        let target = o.lower_bound(&opt);
        let start = VariationalParams::new(vec![2.0, -1.5], vec![0.1, 0.2], 0.3).unwrap();
        let iterations_to_reach = |pre: Preconditioner| -> usize {
            let cfg = OptimizerConfig {
                preconditioner: pre,
                max_iterations: 20_000,
                eps_stop: 1e-300,
                ..OptimizerConfig::default()
            };
            let r = vbill_fit(&o, start.clone(), &cfg).unwrap();
            r.trace
                .iter()
                .position(|p| target - p.lower_bound.value < 1e-3)
                .expect("reaches the optimum")
        };
        let natural = iterations_to_reach(Preconditioner::Natural);
        let identity = iterations_to_reach(Preconditioner::Identity);
        assert!(identity >= 3 * natural, "identity {identity} vs natural {natural}");
    }

    #[test]
    fn fisher_is_available_along_the_path() {
        let o = conjugate_problem(1);
        let opt = optimum(&o);
        assert!(fisher_matrix(&opt).unwrap().cholesky().is_some());
    }

    fn exact_fit(
        model: &ConjugateGaussianModel,
        config: &OptimizerConfig,
    ) -> (FitResult, PriorSpec) {
        let n = Model::n_obs(model);
        let prior = PriorSpec::new(10.0).unwrap();
        let sub: Vec<usize> = (0..n * 3 / 10).collect();
        let d = Model::dim(model);
        let mle = subsample_mle(model, &sub, &vec![0.0; d]).unwrap();
        let init = init_lambda(&mle.theta, &mle.information, n, sub.len()).unwrap();
        let est = ExactEstimator { model };
        let oracle = ReparamOracle {
            estimator: &est,
            prior,
            draws: config.draws,
            source: config.source,
        };
        (vbill_fit(&oracle, init, config).unwrap(), prior)
    }

    #[test]
    fn conjugate_one_dimensional_recovers_posterior() {
        let obs = crate::simulate::gaussian_rows(50, &[0.7], &[0.0], StreamKey::new(11)).unwrap();
        let total: f64 = obs.iter().map(|r| r[0]).sum();
        let model = ConjugateGaussianModel::new(obs, 1).unwrap();
        let (fit, prior) = exact_fit(&model, &OptimizerConfig::default());
        assert_eq!(fit.status, FitStatus::Converged);
        let post_prec = 50.0 + 1.0 / prior.variance;
        let l = &fit.lambda;
        assert!((l.mu[0] - total / post_prec).abs() < 1e-2, "{l:?}");
        let var = l.b[0] * l.b[0] + l.c * l.c;
        assert!((var * post_prec - 1.0).abs() < 0.1, "{var} vs {}", 1.0 / post_prec);
    }

    #[test]
    fn lower_bound_is_monotone_up_to_noise() {
        let obs = crate::simulate::gaussian_rows(200, &[0.5, -0.2], &[1.5, 0.5], StreamKey::new(12)).unwrap();
        let model = ConjugateGaussianModel::with_factor(obs, vec![1.5, 0.5]).unwrap();
        let config = OptimizerConfig {
            source: PointSource::Mc,
            eps_stop: 1e-300,
            max_iterations: 60,
            ..OptimizerConfig::default()
        };
        let (fit, prior) = exact_fit(&model, &config);
        let est = ExactEstimator { model: &model };
        let oracle = ReparamOracle {
            estimator: &est,
            prior,
            draws: config.draws,
            source: config.source,
        };
        let lbs: Vec<f64> = (0..50)
            .map(|r| {
                oracle.evaluate(&fit.lambda, StreamKey::new(999).child(r)).unwrap().lower_bound / 200.0
            })
            .collect();
        let se = crate::diagnostics::variance(&lbs).sqrt();
        let scaled: Vec<f64> = fit.trace.iter().map(|p| p.lower_bound.scaled_value).collect();
        let tail = &scaled[scaled.len() - 21..];
        for w in tail.windows(2) {
            assert!(w[0] - w[1] < 3.0 * se, "decrease {} vs se {se}", w[0] - w[1]);
        }
        // the bound climbs from the initial value
        assert!(scaled[10..].iter().sum::<f64>() / 50.0 > scaled[0] - 3.0 * se);
    }

    #[test]
    fn trace_is_reproducible() {
        let obs = crate::simulate::gaussian_rows(100, &[0.0, 1.0, 2.0], &[1.0, 1.0, 0.0], StreamKey::new(13)).unwrap();
        let model = ConjugateGaussianModel::with_factor(obs, vec![1.0, 1.0, 0.0]).unwrap();
        for source in [PointSource::Mc, PointSource::Rqmc] {
            let config = OptimizerConfig {
                source,
                seed: 77,
                max_iterations: 150,
                ..OptimizerConfig::default()
            };
            let (a, _) = exact_fit(&model, &config);
            let (b, _) = exact_fit(&model, &config);
            assert_eq!(a.trace.len(), b.trace.len());
            for (p, q) in a.trace.iter().zip(&b.trace) {
                assert_eq!(p.lambda, q.lambda);
                assert_eq!(p.lower_bound, q.lower_bound);
                assert_eq!(p.step_norm.to_bits(), q.step_norm.to_bits());
            }
        }
    }

    #[test]
    fn parameter_average_rule_stops_at_fixed_point() {
        let o = conjugate_problem(1);
        let opt = optimum(&o);
        let cfg = OptimizerConfig {
            stop_rule: StopRule::ParameterAverage,
            ..OptimizerConfig::default()
        };
        let r = vbill_fit(&o, opt.clone(), &cfg).unwrap();
        assert_eq!(r.iterations, 2 * cfg.window);
        for (a, b) in r.lambda.to_stacked().iter().zip(opt.to_stacked()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    /// Nonlinear conjugate-gradient ascent (Polak-Ribiere with restarts)
    /// on the mean log-likelihood, using gradients only.
    fn gradient_ascent(model: &LogisticRegressionModel, idx: &[usize]) -> Vec<f64> {
        let d = Model::dim(model);
        let n = idx.len() as f64;
        let eval = |t: &[f64]| {
            let mut g = vec![0.0; d];
            for &i in idx {
                crate::linalg::axpy(1.0, &model.grad_contrib(i, t).unwrap(), &mut g);
            }
            g.iter().map(|v| v / n).collect::<Vec<f64>>()
        };
        let mut theta = vec![0.0; d];
        let mut g = eval(&theta);
        let mut dir = g.clone();
        let mut step = 1.0;
        for it in 0..20_000 {
            if crate::linalg::norm(&g) < 1e-12 {
                break;
            }
            let mut slope = crate::linalg::dot(&g, &dir);
            if slope <= 0.0 || it % (4 * d) == 0 {
                dir = g.clone();
                slope = crate::linalg::dot(&g, &g);
            }
            // exact line search on the directional derivative, which stays
            // accurate where function differences are lost to rounding
            let at = |t: f64| -> Vec<f64> { theta.iter().zip(&dir).map(|(a, b)| a + t * b).collect() };
            let deriv = |t: f64| {
                let gc = eval(&at(t));
                (crate::linalg::dot(&gc, &dir), gc)
            };
            let (mut lo, mut hi) = (0.0, step);
            let (mut s_hi, mut gc) = deriv(hi);
            while s_hi > 0.0 {
                lo = hi;
                hi *= 2.0;
                (s_hi, gc) = deriv(hi);
            }
            let mut t = hi;
            for _ in 0..200 {
                if s_hi.abs() <= 1e-6 * slope {
                    break;
                }
                t = 0.5 * (lo + hi);
                let (s_mid, g_mid) = deriv(t);
                gc = g_mid;
                if s_mid > 0.0 {
                    lo = t;
                } else {
                    hi = t;
                }
                s_hi = s_mid;
                if hi - lo <= 1e-15 * hi {
                    break;
                }
            }
            step = t;
            theta = at(t);
            let beta = (crate::linalg::dot(&gc, &gc) - crate::linalg::dot(&gc, &g)).max(0.0)
                / crate::linalg::dot(&g, &g);
            dir = gc.iter().zip(&dir).map(|(a, b)| a + beta * b).collect();
            g = gc;
        }
        theta
    }

    #[test]
    fn logistic_mle_matches_gradient_ascent() {
        let rows = crate::simulate::logistic_rows(10_000, &crate::simulate::LOGISTIC_BETA, StreamKey::new(14)).unwrap();
        let model = LogisticRegressionModel::from_covariates(3, &rows).unwrap();
        let idx: Vec<usize> = (0..10_000).collect();
        let newton = subsample_mle(&model, &idx, &[0.0; 4]).unwrap();
        let reference = gradient_ascent(&model, &idx);
        for (a, b) in newton.theta.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-6, "{:?} vs {reference:?}", newton.theta);
        }
    }
}
