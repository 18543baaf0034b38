//! Importance-sampling estimates of panel log-likelihood contributions and
//! their scores (via Fisher's identity) for latent-variable models.
//!
//! For panel `i`, latent draws `a_j = loc + scale * xi_j` from a Gaussian
//! proposal give weights `w_j = p(y_i, a_j | theta) / q(a_j)`. The level
//! estimate `mean(w_j)` is unbiased for `p(y_i | theta)`; the score estimate
//! is the self-normalized average of `grad log p(y_i, a_j | theta)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, VbillError};
use crate::linalg::{all_finite, axpy, dot};
use crate::model::{LatentModel, PanelDensity};
use crate::par;
use crate::rqmc;
use crate::stream::StreamKey;
use crate::subsample::Contributions;
use crate::variational::PointSource;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    Prior,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ISConfig {
    /// Importance samples per panel.
    pub samples: usize,
    pub proposal: ProposalKind,
    pub source: PointSource,
}

impl Default for ISConfig {
    fn default() -> Self {
        ISConfig {
            samples: 256,
            proposal: ProposalKind::Laplace,
            source: PointSource::Rqmc,
        }
    }
}

impl ISConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(VbillError::InvalidParameter(
                "at least two importance samples are required".into(),
            ));
        }
        if self.source == PointSource::Rqmc && !self.samples.is_power_of_two() {
            return Err(VbillError::InvalidParameter(format!(
                "RQMC importance sampling needs a power-of-two sample count, got {}",
                self.samples
            )));
        }
        Ok(())
    }
}

/// Gaussian proposal over the scalar latent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentProposal {
    pub location: f64,
    pub scale: f64,
}

impl LatentProposal {
    fn log_density_std(&self, xi: f64) -> f64 {
        -HALF_LN_2PI - self.scale.ln() - 0.5 * xi * xi
    }
}

const NEWTON_STEPS: usize = 50;

/// Prior or Laplace proposal for one panel. Newton failure falls back to the
/// prior.
pub fn build_proposal<P: PanelDensity>(panel: &P, kind: ProposalKind) -> LatentProposal {
    let prior = LatentProposal {
        location: 0.0,
        scale: panel.latent_variance().sqrt(),
    };
    if kind == ProposalKind::Prior || panel.is_empty() {
        return prior;
    }
    match laplace_mode(panel) {
        Some((mode, curv)) => LatentProposal {
            location: mode,
            scale: (-1.0 / curv).sqrt(),
        },
        None => {
            log::debug!("Laplace search did not converge; using the prior proposal");
            prior
        }
    }
}

/// Damped Newton ascent on the (concave) joint log-density in the latent.
fn laplace_mode<P: PanelDensity>(panel: &P) -> Option<(f64, f64)> {
    let mut a = 0.0;
    let mut f = panel.joint(a, None, None);
    for _ in 0..NEWTON_STEPS {
        let (d1, d2) = panel.alpha_derivs(a);
        if !(d2 < 0.0) || !d1.is_finite() {
            return None;
        }
        if d1.abs() <= 1e-10 * (1.0 + d2.abs()) {
            return Some((a, d2));
        }
        let mut step = -d1 / d2;
        let mut accepted = false;
        for _ in 0..30 {
            let fa = panel.joint(a + step, None, None);
            if fa >= f {
                a += step;
                f = fa;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            let (d1, d2) = panel.alpha_derivs(a);
            return (d1.abs() <= 1e-8 * (1.0 + d2.abs()) && d2 < 0.0).then_some((a, d2));
        }
    }
    let (d1, d2) = panel.alpha_derivs(a);
    (d1.abs() <= 1e-8 * (1.0 + d2.abs()) && d2 < 0.0).then_some((a, d2))
}

/// `count` standard-normal latent innovations from `key`.
pub fn latent_points(config: &ISConfig, key: StreamKey) -> Result<Vec<f64>> {
    config.validate()?;
    match config.source {
        PointSource::Mc => {
            let mut rng = key.rng();
            Ok((0..config.samples)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect())
        }
        PointSource::Rqmc => rqmc::to_normal(&rqmc::sobol_batch(1, config.samples, key.0, true)?),
    }
}

/// Result of importance sampling one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelEstimate {
    /// `log mean(w_j)`.
    pub loglik: f64,
    /// Self-normalized score.
    pub grad: Vec<f64>,
    /// Hessian of the simulated log-likelihood for fixed proposal and points.
    pub hess: Option<Vec<f64>>,
    /// Normalized weights.
    pub weights: Vec<f64>,
}

/// Importance-samples a panel with a given proposal and innovations.
pub fn importance_sample<P: PanelDensity>(
    panel: &P,
    proposal: &LatentProposal,
    xi: &[f64],
    dim: usize,
    with_hessian: bool,
    panel_index: usize,
) -> Result<PanelEstimate> {
    let n = xi.len();
    let mut grads = vec![0.0; n * dim];
    let mut hessians = if with_hessian { vec![0.0; n * dim * dim] } else { Vec::new() };
    let mut log_w = Vec::with_capacity(n);
    for (j, &x) in xi.iter().enumerate() {
        let a = proposal.location + proposal.scale * x;
        let g = &mut grads[j * dim..(j + 1) * dim];
        let lj = if with_hessian {
            panel.joint(a, Some(g), Some(&mut hessians[j * dim * dim..(j + 1) * dim * dim]))
        } else {
            panel.joint(a, Some(g), None)
        };
        log_w.push(lj - proposal.log_density_std(x));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(VbillError::DegenerateWeights { panel: panel_index });
    }
    let mut weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(VbillError::DegenerateWeights { panel: panel_index });
    }
    weights.iter_mut().for_each(|w| *w /= total);
    let loglik = max + (total / n as f64).ln();

    let mut grad = vec![0.0; dim];
    for (j, w) in weights.iter().enumerate() {
        axpy(*w, &grads[j * dim..(j + 1) * dim], &mut grad);
    }
    if !all_finite(&grad) {
        return Err(VbillError::non_finite(format!("score estimate for panel {panel_index}")));
    }

    let hess = with_hessian.then(|| {
        // sum_j w_j (H_j + g_j g_j') - g g'
        let mut out = vec![0.0; dim * dim];
        for (j, w) in weights.iter().enumerate() {
            let gj = &grads[j * dim..(j + 1) * dim];
            let hj = &hessians[j * dim * dim..(j + 1) * dim * dim];
            for r in 0..dim {
                for c in 0..dim {
                    out[r * dim + c] += w * (hj[r * dim + c] + gj[r] * gj[c]);
                }
            }
        }
        for r in 0..dim {
            for c in 0..dim {
                out[r * dim + c] -= grad[r] * grad[c];
            }
        }
        out
    });
    Ok(PanelEstimate {
        loglik,
        grad,
        hess,
        weights,
    })
}

/// IS estimate for panel `i` at `theta` with a proposal built at `theta`.
pub fn panel_estimate<L: LatentModel + ?Sized>(
    model: &L,
    i: usize,
    theta: &[f64],
    config: &ISConfig,
    key: StreamKey,
) -> Result<PanelEstimate> {
    let panel = model.panel(i, theta)?;
    let proposal = build_proposal(&panel, config.proposal);
    let xi = latent_points(config, key)?;
    importance_sample(&panel, &proposal, &xi, model.dim(), false, i)
}

/// Fisher-identity estimate of `grad log p(y_i | theta)`.
pub fn grad_contrib_is<L: LatentModel + ?Sized>(
    model: &L,
    i: usize,
    theta: &[f64],
    config: &ISConfig,
    key: StreamKey,
) -> Result<Vec<f64>> {
    Ok(panel_estimate(model, i, theta, config, key)?.grad)
}

/// Log of the unbiased IS estimate of `p(y_i | theta)`.
pub fn loglik_contrib_is<L: LatentModel + ?Sized>(
    model: &L,
    i: usize,
    theta: &[f64],
    config: &ISConfig,
    key: StreamKey,
) -> Result<f64> {
    Ok(panel_estimate(model, i, theta, config, key)?.loglik)
}

/// Sum of per-panel IS log-likelihood estimates; panel `i` uses
/// `key.child(i)`.
pub fn total_loglik_is<L: LatentModel + ?Sized>(
    model: &L,
    theta: &[f64],
    config: &ISConfig,
    key: StreamKey,
) -> Result<f64> {
    let vals = par::try_map_indices(model.n_panels(), |i| {
        loglik_contrib_is(model, i, theta, config, key.child(i as u64))
    })?;
    Ok(vals.into_iter().sum())
}

/// Simulated log-likelihood of a set of panels with proposals fixed at an
/// anchor value and fixed innovations, so it is a smooth function of `theta`
/// with analytic gradient and Hessian.
pub struct SimulatedLikelihood<'a, L: ?Sized> {
    model: &'a L,
    panels: Vec<usize>,
    proposals: Vec<LatentProposal>,
    points: Vec<Vec<f64>>,
}

impl<'a, L: LatentModel + ?Sized> SimulatedLikelihood<'a, L> {
    /// Panel `panels[k]` draws its innovations from `key.child(panels[k])`.
    pub fn new(
        model: &'a L,
        panels: Vec<usize>,
        anchor: &[f64],
        config: &ISConfig,
        key: StreamKey,
    ) -> Result<Self> {
        check_dim(model.dim(), anchor.len())?;
        let proposals = par::try_map_slice(&panels, |&i| {
            Ok::<_, VbillError>(build_proposal(&model.panel(i, anchor)?, config.proposal))
        })?;
        let points = par::try_map_slice(&panels, |&i| latent_points(config, key.child(i as u64)))?;
        Ok(SimulatedLikelihood {
            model,
            panels,
            proposals,
            points,
        })
    }

    pub fn panels(&self) -> &[usize] {
        &self.panels
    }

    pub fn model(&self) -> &'a L {
        self.model
    }

    /// Per-panel value, gradient and Hessian, in panel order.
    pub fn per_panel(&self, theta: &[f64]) -> Result<Vec<PanelEstimate>> {
        let d = self.model.dim();
        par::try_map_indices(self.panels.len(), |k| {
            let i = self.panels[k];
            let panel = self.model.panel(i, theta)?;
            importance_sample(&panel, &self.proposals[k], &self.points[k], d, true, i)
        })
    }

    /// Total value, gradient and row-major Hessian.
    pub fn value_grad_hess(&self, theta: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let d = self.model.dim();
        let parts = self.per_panel(theta)?;
        let mut v = 0.0;
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        for p in &parts {
            v += p.loglik;
            axpy(1.0, &p.grad, &mut g);
            axpy(1.0, p.hess.as_ref().expect("hessian requested"), &mut h);
        }
        Ok((v, g, h))
    }
}

/// Panel contributions for the difference estimator: IS estimates at
/// arbitrary `theta`, and expansion terms at the central value precomputed
/// from a large fixed point set.
pub struct PanelContributions<'a, L: ?Sized> {
    model: &'a L,
    config: ISConfig,
    theta_bar: Vec<f64>,
    loglik_bar: Vec<f64>,
    grad_bar: Vec<f64>,
    hess_bar: Vec<f64>,
}

/// Importance samples used for the central expansion terms.
pub const CENTER_SAMPLES: usize = 1 << 10;

impl<'a, L: LatentModel + ?Sized> PanelContributions<'a, L> {
    pub fn new(model: &'a L, config: ISConfig, theta_bar: &[f64], key: StreamKey) -> Result<Self> {
        config.validate()?;
        let center_config = ISConfig {
            samples: CENTER_SAMPLES.max(config.samples),
            source: PointSource::Rqmc,
            ..config
        };
        let sim = SimulatedLikelihood::new(
            model,
            (0..model.n_panels()).collect(),
            theta_bar,
            &center_config,
            key,
        )?;
        let parts = sim.per_panel(theta_bar)?;
        let d = model.dim();
        let mut loglik_bar = Vec::with_capacity(parts.len());
        let mut grad_bar = Vec::with_capacity(parts.len() * d);
        let mut hess_bar = Vec::with_capacity(parts.len() * d * d);
        for p in parts {
            loglik_bar.push(p.loglik);
            grad_bar.extend_from_slice(&p.grad);
            hess_bar.extend_from_slice(p.hess.as_ref().expect("hessian requested"));
        }
        Ok(PanelContributions {
            model,
            config,
            theta_bar: theta_bar.to_vec(),
            loglik_bar,
            grad_bar,
            hess_bar,
        })
    }

    pub fn theta_bar(&self) -> &[f64] {
        &self.theta_bar
    }

    pub fn config(&self) -> &ISConfig {
        &self.config
    }

    fn check_center(&self, theta_bar: &[f64]) -> Result<()> {
        if theta_bar != self.theta_bar.as_slice() {
            return Err(VbillError::InvalidParameter(
                "panel expansion terms were computed at a different central value".into(),
            ));
        }
        Ok(())
    }
}

impl<L: LatentModel + ?Sized> Contributions for PanelContributions<'_, L> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn n_obs(&self) -> usize {
        self.model.n_panels()
    }

    fn fingerprint(&self) -> u64 {
        self.model.fingerprint()
    }

    fn value_and_grad(
        &self,
        i: usize,
        theta: &[f64],
        key: StreamKey,
        grad: &mut [f64],
    ) -> Result<f64> {
        let est = panel_estimate(self.model, i, theta, &self.config, key)?;
        grad.copy_from_slice(&est.grad);
        Ok(est.loglik)
    }

    fn center_terms(
        &self,
        i: usize,
        theta_bar: &[f64],
        delta: &[f64],
        grad: &mut [f64],
        h_delta: &mut [f64],
    ) -> Result<f64> {
        self.check_center(theta_bar)?;
        let d = self.model.dim();
        if i >= self.loglik_bar.len() {
            return Err(VbillError::IndexOutOfRange {
                index: i,
                n: self.loglik_bar.len(),
            });
        }
        grad.copy_from_slice(&self.grad_bar[i * d..(i + 1) * d]);
        let h = &self.hess_bar[i * d * d..(i + 1) * d * d];
        for (r, out) in h_delta.iter_mut().enumerate() {
            *out = dot(&h[r * d..(r + 1) * d], delta);
        }
        Ok(self.loglik_bar[i])
    }

    fn center_hessian(&self, i: usize, theta_bar: &[f64], hess: &mut [f64]) -> Result<()> {
        self.check_center(theta_bar)?;
        let d = self.model.dim();
        hess.copy_from_slice(&self.hess_bar[i * d * d..(i + 1) * d * d]);
        Ok(())
    }
}
