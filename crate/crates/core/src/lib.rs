//! Natural-gradient variational Bayes for models whose log-likelihood is only
//! available through unbiased subsampled or importance-sampled estimates.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: per-observation contributions and latent-variable panel models.
//! * [`variational`]: the factor-Gaussian family `N(mu, BB' + c^2 I)`.
//! * [`natgrad`]: closed-form inverse Fisher information of that family.
//! * [`subsample`]: control-variate difference estimators of the gradient and
//!   log-likelihood.
//! * [`fisher_identity`]: importance-sampling panel scores and likelihoods.
//! * [`rqmc`]: scrambled Sobol' points.
//! * [`optimizer`]: the stochastic natural-gradient ascent loop.
//! * [`mcmc`]: adaptive random-walk and pseudo-marginal Metropolis-Hastings.
//! * [`chunkstore`]: chunked on-disk datasets with streaming reductions.

pub mod chunkstore;
pub mod diagnostics;
pub mod error;
pub mod fisher_identity;
pub mod hash;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod natgrad;
pub mod optimizer;
pub mod par;
pub mod pipeline;
pub mod rqmc;
pub mod simulate;
pub mod stream;
pub mod subsample;
pub mod summary;
pub mod variational;

pub use error::{Result, VbillError};
