//! Synthetic datasets with known parameters.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VbillError};
use crate::linalg::{dot, sigmoid};
use crate::par;
use crate::stream::StreamKey;

/// Logistic coefficients (intercept, two binary covariates, one uniform).
pub const LOGISTIC_BETA: [f64; 4] = [-1.609, -0.159, 0.085, 0.766];
/// Success probability of each binary covariate.
pub const BINARY_COVARIATE_P: f64 = 0.5;

/// Random-intercept panel model: intercept and ten uniform covariates.
pub const PANEL_BETA: [f64; 11] = [-1.5, 1.5, 0.5, 0.25, 0.3, 0.8, 0.45, 0.85, 0.75, 0.67, 1.5];
/// Log variance of the random intercept.
pub const PANEL_GAMMA: f64 = 0.41;
pub const PANEL_T: usize = 5;

/// A logistic observation `(y, raw covariates)`.
pub type LogisticRow = (f64, Vec<f64>);

/// `n` rows with covariates `(Bernoulli, Bernoulli, U(0,1))` and responses
/// drawn from the logistic law with coefficients `beta` (intercept first).
/// Row `i` uses `key.child(i)`.
pub fn logistic_rows(n: usize, beta: &[f64], key: StreamKey) -> Result<Vec<LogisticRow>> {
    if beta.len() != 4 {
        return Err(VbillError::DimensionMismatch {
            expected: 4,
            found: beta.len(),
        });
    }
    Ok(par::map_indices(n, |i| {
        let mut rng = key.child(i as u64).rng();
        let x = vec![
            f64::from(rng.random_bool(BINARY_COVARIATE_P)),
            f64::from(rng.random_bool(BINARY_COVARIATE_P)),
            rng.random::<f64>(),
        ];
        let eta = beta[0] + dot(&beta[1..], &x);
        let y = f64::from(rng.random::<f64>() < sigmoid(eta));
        (y, x)
    }))
}

/// `n` panels of `t` observations with `U(0,1)` covariates,
/// `alpha_i ~ N(0, exp(gamma))` and a logistic response. `beta` includes the
/// intercept, so each row has `beta.len() - 1` covariates.
pub fn panel_rows(
    n: usize,
    t: usize,
    beta: &[f64],
    gamma: f64,
    key: StreamKey,
) -> Result<Vec<Vec<LogisticRow>>> {
    if beta.is_empty() || t == 0 || !gamma.is_finite() {
        return Err(VbillError::InvalidParameter(
            "panel simulation needs an intercept, t >= 1 and finite gamma".into(),
        ));
    }
    let p = beta.len() - 1;
    let tau = (0.5 * gamma).exp();
    Ok(par::map_indices(n, |i| {
        let mut rng = key.child(i as u64).rng();
        let z: f64 = StandardNormal.sample(&mut rng);
        let alpha = tau * z;
        (0..t)
            .map(|_| {
                let x: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
                let eta = beta[0] + dot(&beta[1..], &x) + alpha;
                (f64::from(rng.random::<f64>() < sigmoid(eta)), x)
            })
            .collect()
    }))
}

/// `n` observations `y_i = mean + z_i + v * w_i` with independent standard
/// normal `z_i` and `w_i`, i.e. covariance `I + vv'`.
pub fn gaussian_rows(n: usize, mean: &[f64], factor: &[f64], key: StreamKey) -> Result<Vec<Vec<f64>>> {
    if mean.len() != factor.len() || mean.is_empty() {
        return Err(VbillError::DimensionMismatch {
            expected: mean.len(),
            found: factor.len(),
        });
    }
    Ok(par::map_indices(n, |i| {
        let mut rng = key.child(i as u64).rng();
        let w: f64 = StandardNormal.sample(&mut rng);
        mean.iter()
            .zip(factor)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + z + v * w
            })
            .collect()
    }))
}

/// `n` panels of `t` draws `y_it = alpha_i + e_it`, `alpha_i ~ N(0, exp(gamma))`.
pub fn normal_panel_rows(n: usize, t: usize, gamma: f64, key: StreamKey) -> Vec<Vec<f64>> {
    let tau = (0.5 * gamma).exp();
    par::map_indices(n, |i| {
        let mut rng = key.child(i as u64).rng();
        let z: f64 = StandardNormal.sample(&mut rng);
        let alpha = tau * z;
        (0..t)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                alpha + e
            })
            .collect()
    })
}
