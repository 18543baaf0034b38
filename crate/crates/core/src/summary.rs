//! Posterior summaries, marginal density grids and side-by-side comparisons.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VbillError};
use crate::mcmc::ChainOutput;
use crate::variational::{marginal_log_density, VariationalParams};

/// Points per marginal density grid, spanning the mean +- 5 SD.
pub const GRID_POINTS: usize = 201;
pub const GRID_HALF_WIDTH: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub method: String,
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Content fingerprint of the dataset the summary was computed from.
    pub fingerprint: u64,
    pub iterations: usize,
    pub wall_time: f64,
}

/// Default parameter names: `beta0..beta{k-1}` plus `gamma` for panel models.
pub fn parameter_names(d: usize, latent_variance: bool) -> Vec<String> {
    let k = if latent_variance { d - 1 } else { d };
    let mut names: Vec<String> = (0..k).map(|j| format!("beta{j}")).collect();
    if latent_variance {
        names.push("gamma".into());
    }
    names
}

impl PosteriorSummary {
    /// Gaussian marginals of the variational approximation.
    pub fn from_lambda(
        lambda: &VariationalParams,
        names: Vec<String>,
        fingerprint: u64,
        iterations: usize,
        wall_time: f64,
    ) -> Self {
        let d = lambda.dim();
        PosteriorSummary {
            method: "vbill".into(),
            names,
            means: lambda.mu.clone(),
            sds: (0..d).map(|j| lambda.marginal_sd(j)).collect(),
            fingerprint,
            iterations,
            wall_time,
        }
    }

    pub fn from_chain(
        chain: &ChainOutput,
        names: Vec<String>,
        fingerprint: u64,
        iterations: usize,
        wall_time: f64,
    ) -> Self {
        PosteriorSummary {
            method: "mcmc".into(),
            names,
            means: chain.means.clone(),
            sds: chain.sds.clone(),
            fingerprint,
            iterations,
            wall_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub name: String,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

/// Marginal density of each coordinate on a 201-point grid.
pub fn density_grids(lambda: &VariationalParams, names: &[String]) -> Vec<DensityGrid> {
    (0..lambda.dim())
        .map(|j| {
            let (m, s) = (lambda.mu[j], lambda.marginal_sd(j));
            let x: Vec<f64> = (0..GRID_POINTS)
                .map(|k| {
                    m + s * GRID_HALF_WIDTH * (2.0 * k as f64 / (GRID_POINTS - 1) as f64 - 1.0)
                })
                .collect();
            let density = x.iter().map(|&v| marginal_log_density(lambda, j, v).exp()).collect();
            DensityGrid {
                name: names.get(j).cloned().unwrap_or_else(|| format!("theta{j}")),
                x,
                density,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub mean_a: f64,
    pub sd_a: f64,
    pub mean_b: f64,
    pub sd_b: f64,
    /// `|mean_a - mean_b| / sd_b`.
    pub standardized_diff: f64,
    /// `sd_a / sd_b - 1`.
    pub sd_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method_a: String,
    pub method_b: String,
    pub rows: Vec<ComparisonRow>,
    /// `wall_time_a / wall_time_b`.
    pub wall_time_ratio: f64,
    pub iterations_a: usize,
    pub iterations_b: usize,
    pub fingerprint: u64,
}

/// Compares summary `a` against reference `b`; both must describe the same
/// dataset.
pub fn compare(a: &PosteriorSummary, b: &PosteriorSummary) -> Result<Comparison> {
    if a.fingerprint != b.fingerprint {
        return Err(VbillError::FingerprintMismatch {
            expected: b.fingerprint,
            found: a.fingerprint,
        });
    }
    if a.means.len() != b.means.len() {
        return Err(VbillError::DimensionMismatch {
            expected: b.means.len(),
            found: a.means.len(),
        });
    }
    let rows = (0..a.means.len())
        .map(|j| ComparisonRow {
            name: b.names.get(j).cloned().unwrap_or_else(|| format!("theta{j}")),
            mean_a: a.means[j],
            sd_a: a.sds[j],
            mean_b: b.means[j],
            sd_b: b.sds[j],
            standardized_diff: (a.means[j] - b.means[j]).abs() / b.sds[j],
            sd_rel_error: a.sds[j] / b.sds[j] - 1.0,
        })
        .collect();
    Ok(Comparison {
        method_a: a.method.clone(),
        method_b: b.method.clone(),
        rows,
        wall_time_ratio: a.wall_time / b.wall_time,
        iterations_a: a.iterations,
        iterations_b: b.iterations,
        fingerprint: a.fingerprint,
    })
}

impl Comparison {
    pub fn max_standardized_diff(&self) -> f64 {
        self.rows.iter().map(|r| r.standardized_diff).fold(0.0, f64::max)
    }

    pub fn max_sd_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.sd_rel_error.abs()).fold(0.0, f64::max)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let (a, b) = (&self.method_a, &self.method_b);
        let _ = writeln!(s, "dataset {:016x}", self.fingerprint);
        let _ = writeln!(
            s,
            "{:<10} {:>12} {:>10} {:>12} {:>10} {:>10} {:>9}",
            "parameter",
            format!("{a} mean"),
            format!("{a} sd"),
            format!("{b} mean"),
            format!("{b} sd"),
            "|dmean|/sd",
            "sd ratio"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>12.6} {:>10.6} {:>12.6} {:>10.6} {:>10.4} {:>9.4}",
                r.name,
                r.mean_a,
                r.sd_a,
                r.mean_b,
                r.sd_b,
                r.standardized_diff,
                1.0 + r.sd_rel_error
            );
        }
        let _ = writeln!(
            s,
            "iterations: {a} {} / {b} {}; wall-time ratio {a}/{b} = {:.4}",
            self.iterations_a, self.iterations_b, self.wall_time_ratio
        );
        s
    }
}
