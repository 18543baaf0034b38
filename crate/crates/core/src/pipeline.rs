//! End-to-end fits: subsample initialization, control-variate cache at the
//! same central value, then the stochastic natural-gradient ascent.

use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::chunkstore::{ChunkStore, ChunkedEstimator};
use crate::error::{Result, VbillError};
use crate::fisher_identity::{ISConfig, PanelContributions};
use crate::model::{LatentModel, Model};
use crate::optimizer::{
    init_lambda, simulated_mle, subsample_mle, vbill_fit, FitResult, MleResult, OptimizerConfig,
    ReparamOracle,
};
use crate::stream::StreamKey;
use crate::subsample::{
    build_control_variates, CenterSums, Contributions, ControlVariateCache, GradientEstimator, SubsampledEstimator,
};
use crate::variational::{PriorSpec, VariationalParams};

/// Prior variance used unless configured otherwise.
pub const DEFAULT_PRIOR_VARIANCE: f64 = 50.0;
pub const DEFAULT_INIT_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbillSettings {
    pub optimizer: OptimizerConfig,
    /// Subsample size per gradient estimate.
    pub m: usize,
    /// Fraction of observations (or panels) used for the initial MLE.
    pub init_fraction: f64,
    pub prior_variance: f64,
    /// Importance sampling for panel models.
    pub is: ISConfig,
}

impl VbillSettings {
    pub fn new(m: usize) -> Self {
        VbillSettings {
            optimizer: OptimizerConfig::default(),
            m,
            init_fraction: DEFAULT_INIT_FRACTION,
            prior_variance: DEFAULT_PRIOR_VARIANCE,
            is: ISConfig::default(),
        }
    }

    fn init_size(&self, n: usize) -> Result<usize> {
        if !(self.init_fraction > 0.0 && self.init_fraction <= 1.0) {
            return Err(VbillError::InvalidParameter(format!(
                "initialization fraction {} outside (0, 1]",
                self.init_fraction
            )));
        }
        Ok(((n as f64 * self.init_fraction).round() as usize).clamp(1, n.max(1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbillRun {
    pub fit: FitResult,
    pub init: VariationalParams,
    pub mle: MleResult,
    /// Central value of the control variates (the subsample MLE).
    pub theta_bar: Vec<f64>,
    /// Seconds for initialization, cache building and the ascent.
    pub wall_time: f64,
}

/// Random subset of `k` of `n` indices, sorted.
pub fn init_subset(n: usize, k: usize, key: StreamKey) -> Vec<usize> {
    let mut idx = sample(&mut key.rng(), n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Key for initialization randomness, disjoint from the per-iteration keys.
fn setup_key(seed: u64) -> StreamKey {
    StreamKey::new(seed).child(u64::MAX)
}

fn run_with<C: Contributions + ?Sized>(
    contrib: &C,
    cache: ControlVariateCache,
    init: VariationalParams,
    settings: &VbillSettings,
) -> Result<FitResult> {
    let estimator = SubsampledEstimator::new(contrib, cache, settings.m)?;
    fit_with(&estimator, init, settings)
}

fn fit_with<E: GradientEstimator + ?Sized>(
    estimator: &E,
    init: VariationalParams,
    settings: &VbillSettings,
) -> Result<FitResult> {
    let oracle = ReparamOracle {
        estimator,
        prior: PriorSpec::new(settings.prior_variance)?,
        draws: settings.optimizer.draws,
        source: settings.optimizer.source,
    };
    Ok(vbill_fit(&oracle, init, &settings.optimizer)?)
}

/// Fit of a model with tractable per-observation log-likelihoods.
pub fn run_tractable<M: Model>(model: &M, settings: &VbillSettings) -> Result<VbillRun> {
    let start = Instant::now();
    let n = model.n_obs();
    if n == 0 {
        return Err(VbillError::Empty("dataset"));
    }
    let subset = init_subset(n, settings.init_size(n)?, setup_key(settings.optimizer.seed));
    let mle = subsample_mle(model, &subset, &vec![0.0; model.dim()])?;
    let init = init_lambda(&mle.theta, &mle.information, n, subset.len())?;
    let cache = build_control_variates(model, &mle.theta)?;
    let fit = run_with(model, cache, init.clone(), settings)?;
    Ok(VbillRun {
        fit,
        init,
        theta_bar: mle.theta.clone(),
        mle,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Fit of a tractable model stored in chunks. Only the initialization subset
/// and the rows of each subsample are held in memory; the control-variate
/// sums are streamed one chunk at a time. `build` turns stored rows into a
/// model.
///
/// Uses the same subsets and random streams as [`run_tractable`] on the
/// in-memory data, so the two agree up to the summation order of the cache.
pub fn run_chunked<M, B>(store: &ChunkStore, build: B, settings: &VbillSettings) -> Result<VbillRun>
where
    M: Model,
    B: Fn(&[Vec<f64>]) -> Result<M> + Send + Sync,
{
    let start = Instant::now();
    let n = store.n();
    if n == 0 {
        return Err(VbillError::Empty("dataset"));
    }
    let subset = init_subset(n, settings.init_size(n)?, setup_key(settings.optimizer.seed));
    let local = build(&store.fetch_rows(&subset)?)?;
    let all: Vec<usize> = (0..subset.len()).collect();
    let mle = subsample_mle(&local, &all, &vec![0.0; local.dim()])?;
    drop(local);
    let init = init_lambda(&mle.theta, &mle.information, n, subset.len())?;

    let partials = store.map_chunks(|chunk| {
        let rows: Vec<Vec<f64>> = chunk.rows().map(<[f64]>::to_vec).collect();
        CenterSums::accumulate(&build(&rows)?, 0..rows.len(), &mle.theta)
    })?;
    let mut sums = CenterSums::zero(mle.theta.len());
    partials.iter().for_each(|p| sums.merge(p));
    let cache = ControlVariateCache::from_sums(mle.theta.clone(), sums, store.manifest().content);
    let estimator = ChunkedEstimator::new(store, cache, settings.m, build)?;
    let fit = fit_with(&estimator, init.clone(), settings)?;
    Ok(VbillRun {
        fit,
        init,
        theta_bar: mle.theta.clone(),
        mle,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Fit of a random-effects panel model. The initial MLE maximizes a
/// simulated likelihood on a subset of panels; per-panel gradients use
/// importance sampling.
pub fn run_panel<L: LatentModel>(model: &L, settings: &VbillSettings) -> Result<VbillRun> {
    let start = Instant::now();
    let n = model.n_panels();
    if n == 0 {
        return Err(VbillError::Empty("dataset"));
    }
    let key = setup_key(settings.optimizer.seed);
    let subset = init_subset(n, settings.init_size(n)?, key.child(0));
    let mle = simulated_mle(model, &subset, &vec![0.0; model.dim()], &settings.is, key.child(1))?;
    let init = init_lambda(&mle.theta, &mle.information, n, subset.len())?;
    let contrib = PanelContributions::new(model, settings.is, &mle.theta, key.child(2))?;
    let cache = build_control_variates(&contrib, &mle.theta)?;
    let fit = run_with(&contrib, cache, init.clone(), settings)?;
    Ok(VbillRun {
        fit,
        init,
        theta_bar: mle.theta.clone(),
        mle,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
