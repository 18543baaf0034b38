//! Baseline posterior samplers: adaptive random-walk Metropolis-Hastings and
//! its pseudo-marginal variant with an estimated likelihood.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{batch_means_se, mean, variance};
use crate::error::{check_dim, Result, VbillError};
use crate::fisher_identity::{total_loglik_is, ISConfig};
use crate::linalg::all_finite;
use crate::model::LatentModel;
use crate::stream::StreamKey;

/// Scale of the adapted proposal is `ADAPT_SCALE / d`.
pub const ADAPT_SCALE: f64 = 2.38 * 2.38;
pub const ADAPT_EPSILON: f64 = 1e-6;
pub const ADAPT_START: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Total iterations including burn-in.
    pub iterations: usize,
    pub burn_in: usize,
    pub initial: Vec<f64>,
    /// Iteration after which the proposal covariance follows the history.
    pub adaptation_start: usize,
    /// Row-major proposal covariance used before adaptation.
    pub initial_proposal: Vec<f64>,
    pub seed: u64,
}

impl ChainConfig {
    /// 30000 kept draws after 10000 burn-in, with an isotropic starting
    /// proposal of standard deviation `0.1 / sqrt(d)`.
    pub fn new(initial: Vec<f64>, seed: u64) -> Self {
        let d = initial.len();
        let mut prop = vec![0.0; d * d];
        for j in 0..d {
            prop[j * d + j] = 0.01 / d.max(1) as f64;
        }
        ChainConfig {
            iterations: 40_000,
            burn_in: 10_000,
            initial,
            adaptation_start: ADAPT_START,
            initial_proposal: prop,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.initial.len();
        if d == 0 {
            return Err(VbillError::Empty("initial value"));
        }
        check_dim(d * d, self.initial_proposal.len())?;
        if self.burn_in >= self.iterations {
            return Err(VbillError::InvalidParameter(format!(
                "burn-in {} must be below the iteration count {}",
                self.burn_in, self.iterations
            )));
        }
        if !all_finite(&self.initial) {
            return Err(VbillError::non_finite("initial value of the chain"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub dim: usize,
    /// Row-major post-burn-in draws.
    pub draws: Vec<f64>,
    /// Acceptance rate after burn-in.
    pub acceptance_rate: f64,
    pub burn_in_acceptance_rate: f64,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Batch-means standard errors of the means.
    pub mcse: Vec<f64>,
}

impl ChainOutput {
    pub fn len(&self) -> usize {
        self.draws.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().skip(j).step_by(self.dim).copied().collect()
    }

    fn from_draws(dim: usize, draws: Vec<f64>, acc: f64, burn_acc: f64) -> Self {
        let mut out = ChainOutput {
            dim,
            draws,
            acceptance_rate: acc,
            burn_in_acceptance_rate: burn_acc,
            means: vec![],
            sds: vec![],
            mcse: vec![],
        };
        for j in 0..dim {
            let col = out.column(j);
            out.means.push(mean(&col));
            out.sds.push(variance(&col).sqrt());
            out.mcse.push(batch_means_se(&col));
        }
        out
    }
}

/// Running mean and scatter of the chain history.
struct History {
    n: f64,
    mean: Vec<f64>,
    scatter: Vec<f64>,
}

impl History {
    fn new(first: &[f64]) -> Self {
        let d = first.len();
        History {
            n: 1.0,
            mean: first.to_vec(),
            scatter: vec![0.0; d * d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        let d = x.len();
        self.n += 1.0;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / self.n;
        }
        for a in 0..d {
            let da = x[a] - self.mean[a];
            for b in 0..d {
                self.scatter[a * d + b] += delta[b] * da;
            }
        }
    }

    fn proposal_factor(&self) -> Option<DMatrix<f64>> {
        let d = self.mean.len();
        let scale = ADAPT_SCALE / d as f64;
        let mut cov = DMatrix::from_row_slice(d, d, &self.scatter) / (self.n - 1.0).max(1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        for j in 0..d {
            cov[(j, j)] += ADAPT_EPSILON;
        }
        (cov * scale).cholesky().map(|c| c.l())
    }
}

fn run_chain<F>(config: &ChainConfig, mut log_target: F, freeze_at: Option<usize>) -> Result<ChainOutput>
where
    F: FnMut(&[f64], u64) -> Result<f64>,
{
    config.validate()?;
    let d = config.initial.len();
    let mut factor = DMatrix::from_row_slice(d, d, &config.initial_proposal)
        .cholesky()
        .ok_or_else(|| VbillError::NotPositiveDefinite("initial proposal covariance".into()))?
        .l();
    let mut rng = StreamKey::new(config.seed).rng();
    let mut current = config.initial.clone();
    let mut current_lp = log_target(&current, 0)?;
    if !current_lp.is_finite() {
        return Err(VbillError::non_finite("log target at the initial value"));
    }
    let mut history = History::new(&current);
    let kept = config.iterations - config.burn_in;
    let mut draws = Vec::with_capacity(kept * d);
    let (mut acc_burn, mut acc_post) = (0usize, 0usize);
    for t in 0..config.iterations {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = &factor * z;
        let proposal: Vec<f64> = current.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let lp = log_target(&proposal, t as u64 + 1)?;
        let u: f64 = rng.random();
        // NaN targets are rejected along with -inf
        if lp.is_finite() && u.ln() < lp - current_lp {
            current = proposal;
            current_lp = lp;
            if t < config.burn_in {
                acc_burn += 1;
            } else {
                acc_post += 1;
            }
        }
        if t >= config.burn_in {
            draws.extend_from_slice(&current);
        }
        history.push(&current);
        let adapting = freeze_at.is_none_or(|f| t + 1 < f);
        if adapting && t + 1 >= config.adaptation_start {
            if let Some(f) = history.proposal_factor() {
                factor = f;
            }
        }
    }
    Ok(ChainOutput::from_draws(
        d,
        draws,
        acc_post as f64 / kept as f64,
        if config.burn_in == 0 {
            f64::NAN
        } else {
            acc_burn as f64 / config.burn_in as f64
        },
    ))
}

/// Adaptive random-walk Metropolis-Hastings on an exact log target.
pub fn adaptive_rw_mh<F>(log_target: F, config: &ChainConfig) -> Result<ChainOutput>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    run_chain(config, |theta, _| log_target(theta), None)
}

/// Pseudo-marginal Metropolis-Hastings. `loglik` returns the log of an
/// unbiased likelihood estimate using the supplied randomness; the estimate
/// at the current state is carried, never refreshed. Proposal adaptation
/// stops at the end of burn-in.
pub fn pmmh<F, P>(loglik: F, log_prior: P, config: &ChainConfig) -> Result<ChainOutput>
where
    F: Fn(&[f64], StreamKey) -> Result<f64>,
    P: Fn(&[f64]) -> f64,
{
    let estimator_key = StreamKey::new(config.seed).child(1);
    run_chain(
        config,
        |theta, t| {
            let prior = log_prior(theta);
            if !prior.is_finite() {
                return Ok(f64::NEG_INFINITY);
            }
            let l = match loglik(theta, estimator_key.child(t)) {
                Ok(v) => v,
                Err(VbillError::DegenerateWeights { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            Ok(l + prior)
        },
        Some(config.burn_in),
    )
}

/// Random-walk proposal covariance `2.38^2 / d` times the inverse of an
/// information matrix (row-major), a good start when a mode is known.
pub fn proposal_from_information(information: &[f64], d: usize) -> Result<Vec<f64>> {
    check_dim(d * d, information.len())?;
    let inv = crate::linalg::to_dmatrix(information, d)
        .try_inverse()
        .ok_or_else(|| VbillError::NotPositiveDefinite("information matrix is singular".into()))?;
    let mut out = crate::linalg::from_dmatrix(&inv);
    out.iter_mut().for_each(|v| *v *= ADAPT_SCALE / d as f64);
    Ok(out)
}

pub const TUNE_REPLICATIONS: usize = 50;
pub const TUNE_MAX_SAMPLES: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunedSamples {
    pub samples: usize,
    /// Empirical variance of the total log-likelihood estimate.
    pub variance: f64,
}

/// Variance over `reps` replications of the total IS log-likelihood at `theta`.
pub fn loglik_estimate_variance<L: LatentModel + ?Sized>(
    model: &L,
    theta: &[f64],
    config: &ISConfig,
    reps: usize,
    key: StreamKey,
) -> Result<f64> {
    let vals = (0..reps)
        .map(|r| total_loglik_is(model, theta, config, key.child(r as u64)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(variance(&vals))
}

/// Smallest power of two (at least 2) whose total log-likelihood estimate has
/// variance at most `target_var`, measured over 50 replications. Gives up at
/// `2^16` with a warning.
pub fn tune_is_samples<L: LatentModel + ?Sized>(
    model: &L,
    theta: &[f64],
    target_var: f64,
    base: &ISConfig,
    key: StreamKey,
) -> Result<TunedSamples> {
    let mut samples = 2;
    loop {
        let config = ISConfig { samples, ..*base };
        let var = loglik_estimate_variance(model, theta, &config, TUNE_REPLICATIONS, key.child(samples as u64))?;
        if var <= target_var {
            return Ok(TunedSamples {
                samples,
                variance: var,
            });
        }
        if samples >= TUNE_MAX_SAMPLES {
            log::warn!(
                "log-likelihood variance {var:.3} still above {target_var} at {samples} importance samples"
            );
            return Ok(TunedSamples {
                samples,
                variance: var,
            });
        }
        samples *= 2;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawsHeader {
    pub dim: usize,
    pub rows: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

fn header_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".header");
    PathBuf::from(p)
}

/// Writes the draws as little-endian f64 rows, plus a `key=value` text
/// header next to it (`<path>.header`).
pub fn write_draws(path: &Path, out: &ChainOutput, config: &ChainConfig) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| VbillError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in &out.draws {
        w.write_all(&v.to_le_bytes()).map_err(|e| VbillError::io(path, e))?;
    }
    w.flush().map_err(|e| VbillError::io(path, e))?;
    let hp = header_path(path);
    let text = format!(
        "dim={}\nrows={}\niterations={}\nburn_in={}\nseed={}\n",
        out.dim,
        out.len(),
        config.iterations,
        config.burn_in,
        config.seed
    );
    std::fs::write(&hp, text).map_err(|e| VbillError::io(&hp, e))
}

pub fn read_draws(path: &Path) -> Result<(DrawsHeader, Vec<f64>)> {
    let hp = header_path(path);
    let file = std::fs::File::open(&hp).map_err(|e| VbillError::io(&hp, e))?;
    let mut fields = std::collections::HashMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| VbillError::io(&hp, e))?;
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<u64> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| VbillError::Schema(format!("draws header lacks a valid `{k}`")))
    };
    let header = DrawsHeader {
        dim: get("dim")? as usize,
        rows: get("rows")? as usize,
        iterations: get("iterations")? as usize,
        burn_in: get("burn_in")? as usize,
        seed: get("seed")?,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| VbillError::io(path, e))?;
    if bytes.len() != header.dim * header.rows * 8 {
        return Err(VbillError::Schema(format!(
            "draws file has {} bytes, header implies {}",
            bytes.len(),
            header.dim * header.rows * 8
        )));
    }
    let draws = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, draws))
}
