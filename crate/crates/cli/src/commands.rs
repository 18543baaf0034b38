use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::bail;

use vbill::chunkstore::{
    logistic_records, panel_records, read_csv, split_logistic, ChunkOptions, ChunkStore, Schema,
};
use vbill::fisher_identity::{total_loglik_is, ISConfig, ProposalKind};
use vbill::mcmc::{adaptive_rw_mh, pmmh, tune_is_samples, write_draws, proposal_from_information, ChainConfig};
use vbill::model::{full_loglik, LatentModel, LogisticRegressionModel, Model};
use vbill::optimizer::{simulated_mle, subsample_mle, LearningRate, MleResult, StopRule};
use vbill::pipeline::{run_chunked, run_panel, run_tractable, VbillRun, VbillSettings};
use vbill::simulate;
use vbill::stream::StreamKey;
use vbill::summary::{compare, density_grids, parameter_names, PosteriorSummary};
use vbill::variational::{PointSource, PriorSpec};

use crate::config::{join, ConfigError, Resolved};
use crate::data::{
    create_dir, kind_of, load, open_store, parse_kind, read_json, recorded_factor, write_file, write_json, Dataset,
    CONFIG_FILE, TRUTH_FILE,
};

fn data_dir_default() -> String {
    std::env::var("VBILL_DATA_DIR").unwrap_or_default()
}

fn chunk_options(cfg: &Resolved) -> anyhow::Result<ChunkOptions> {
    Ok(ChunkOptions {
        rows_per_chunk: cfg.get("rows-per-chunk")?,
        shuffle: cfg.get_opt("shuffle")?,
    })
}

fn proposal_kind(cfg: &Resolved) -> anyhow::Result<ProposalKind> {
    match cfg.raw("is-proposal") {
        "laplace" => Ok(ProposalKind::Laplace),
        "prior" => Ok(ProposalKind::Prior),
        other => bail!(ConfigError(format!("unknown proposal `{other}` (expected laplace or prior)"))),
    }
}

fn names_for(schema: Schema, d: usize) -> Vec<String> {
    parameter_names(d, schema == Schema::Panel)
}

fn summary_text(s: &PosteriorSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method {} on dataset {:016x}", s.method, s.fingerprint);
    let _ = writeln!(out, "{:<10} {:>12} {:>12}", "parameter", "mean", "sd");
    for j in 0..s.means.len() {
        let _ = writeln!(out, "{:<10} {:>12.6} {:>12.6}", s.names[j], s.means[j], s.sds[j]);
    }
    let _ = writeln!(out, "iterations {}, wall time {:.3}s", s.iterations, s.wall_time);
    out
}

// ---------------------------------------------------------------------------

pub fn simulate(config: Option<PathBuf>, values: Vec<(&'static str, Option<String>)>) -> anyhow::Result<()> {
    let data_dir = data_dir_default();
    let defaults = [
        ("kind", "logistic"),
        ("n", "10000"),
        ("seed", "0"),
        ("out", data_dir.as_str()),
        ("rows-per-chunk", "100000"),
        ("shuffle", ""),
        ("beta", ""),
        ("gamma", "0.41"),
        ("t", "5"),
        ("mean", "0.5,-0.5"),
        ("factor", "1,0.5"),
    ];
    let mut cfg = Resolved::new(&defaults, config.as_deref(), values)?;
    let schema = parse_kind(cfg.raw("kind"))?;
    let n: usize = cfg.get("n")?;
    let key = StreamKey::new(cfg.get("seed")?);
    let out = PathBuf::from(cfg.raw("out"));
    create_dir(&out)?;
    let options = chunk_options(&cfg)?;

    let mut truth = format!("kind={}\nn={n}\nseed={}\n", kind_of(schema), cfg.raw("seed"));
    let store = match schema {
        Schema::Logistic => {
            if !cfg.is_set("beta") {
                cfg.set("beta", join(&simulate::LOGISTIC_BETA));
            }
            let beta = cfg.list("beta")?;
            let rows = simulate::logistic_rows(n, &beta, key)?;
            let _ = writeln!(truth, "beta={}", join(&beta));
            ChunkStore::write(&out, schema, 3, logistic_records(&rows), options)?
        }
        Schema::Panel => {
            if !cfg.is_set("beta") {
                cfg.set("beta", join(&simulate::PANEL_BETA));
            }
            let beta = cfg.list("beta")?;
            let gamma: f64 = cfg.get("gamma")?;
            let t: usize = cfg.get("t")?;
            let panels = simulate::panel_rows(n, t, &beta, gamma, key)?;
            let _ = writeln!(truth, "beta={}\ngamma={gamma}\nt={t}", join(&beta));
            ChunkStore::write(&out, schema, beta.len() - 1, panel_records(&panels), options)?
        }
        Schema::Gaussian => {
            let mean = cfg.list("mean")?;
            let factor = cfg.list("factor")?;
            let rows = simulate::gaussian_rows(n, &mean, &factor, key)?;
            let _ = writeln!(truth, "mean={}\nfactor={}", join(&mean), join(&factor));
            ChunkStore::write(&out, schema, mean.len(), rows, options)?
        }
    };
    write_file(&out, TRUTH_FILE, truth)?;
    write_file(&out, CONFIG_FILE, cfg.to_text())?;
    let m = store.manifest();
    println!(
        "wrote {} rows of {} data in {} chunks to {} (content {:016x})",
        m.n,
        m.schema,
        m.chunks.len(),
        out.display(),
        m.content
    );
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn chunk(config: Option<PathBuf>, values: Vec<(&'static str, Option<String>)>) -> anyhow::Result<()> {
    let defaults = [
        ("input", ""),
        ("out", ""),
        ("schema", ""),
        ("rows-per-chunk", "100000"),
        ("shuffle", ""),
    ];
    let mut cfg = Resolved::new(&defaults, config.as_deref(), values)?;
    let input = PathBuf::from(cfg.get::<String>("input")?);
    let out = PathBuf::from(cfg.raw("out"));
    create_dir(&out)?;
    if input.canonicalize().ok() == out.canonicalize().ok() {
        bail!(ConfigError("input and output directories must differ".into()));
    }
    let options = chunk_options(&cfg)?;
    let store = if input.is_dir() {
        let source = open_store(&input)?;
        cfg.set("schema", source.manifest().schema.to_string());
        let rows = source.read_all()?;
        let store = ChunkStore::write(&out, source.manifest().schema, source.manifest().d, rows, options)?;
        if let Ok(truth) = std::fs::read(input.join(TRUTH_FILE)) {
            write_file(&out, TRUTH_FILE, truth)?;
        }
        store
    } else {
        let schema: Schema = cfg.get("schema")?;
        let (d, rows) = read_csv(&input, schema)?;
        ChunkStore::write(&out, schema, d, rows, options)?
    };
    write_file(&out, CONFIG_FILE, cfg.to_text())?;
    let m = store.manifest();
    println!(
        "wrote {} rows in {} chunks to {} (content {:016x})",
        m.n,
        m.chunks.len(),
        out.display(),
        m.content
    );
    Ok(())
}

// ---------------------------------------------------------------------------

/// Subsample size from an absolute count or a percentage such as `1%`.
fn subsample_size(raw: &str, n: usize) -> Result<usize, ConfigError> {
    let bad = || ConfigError(format!("`m`: cannot parse `{raw}` (expected a count or a percentage)"));
    let m = match raw.strip_suffix('%') {
        Some(p) => {
            let p: f64 = p.trim().parse().map_err(|_| bad())?;
            if !(p > 0.0 && p <= 100.0) {
                return Err(bad());
            }
            ((n as f64 * p / 100.0).ceil() as usize).max(1)
        }
        None => raw.parse().map_err(|_| bad())?,
    };
    if m == 0 {
        return Err(ConfigError("`m` must be positive".into()));
    }
    Ok(m)
}

fn model_kind(cfg: &mut Resolved, store: &ChunkStore) -> anyhow::Result<Schema> {
    if !cfg.is_set("model") {
        cfg.set("model", kind_of(store.manifest().schema));
    }
    Ok(parse_kind(cfg.raw("model"))?)
}

fn factor(cfg: &mut Resolved, data: &Path, schema: Schema) -> anyhow::Result<Vec<f64>> {
    if schema == Schema::Gaussian && !cfg.is_set("factor") {
        if let Some(f) = recorded_factor(data)? {
            cfg.set("factor", join(&f));
        }
    }
    Ok(cfg.list("factor")?)
}

#[derive(serde::Serialize)]
struct VbillOutput<'a> {
    lambda: &'a vbill::variational::VariationalParams,
    init: &'a vbill::variational::VariationalParams,
    theta_bar: &'a [f64],
    status: vbill::optimizer::FitStatus,
    iterations: usize,
    m: usize,
    n: usize,
    fingerprint: u64,
}

pub fn fit_vbill(config: Option<PathBuf>, values: Vec<(&'static str, Option<String>)>) -> anyhow::Result<()> {
    let data_dir = data_dir_default();
    let defaults = [
        ("data", data_dir.as_str()),
        ("out", ""),
        ("model", ""),
        ("m", "1%"),
        ("draws", "256"),
        ("source", "rqmc"),
        ("eps-stop", "1e-7"),
        ("max-iterations", "1000"),
        ("window", "5"),
        ("seed", "0"),
        ("prior-variance", "50"),
        ("a0", "0.1"),
        ("decay", "50"),
        ("init-fraction", "0.3"),
        ("stop-rule", "lower-bound"),
        ("is-samples", "256"),
        ("is-proposal", "laplace"),
        ("is-source", "rqmc"),
        ("factor", ""),
        ("chunked", "false"),
    ];
    let mut cfg = Resolved::new(&defaults, config.as_deref(), values)?;
    let data = PathBuf::from(cfg.raw("data"));
    let store = open_store(&data)?;
    let schema = model_kind(&mut cfg, &store)?;
    let factor = factor(&mut cfg, &data, schema)?;
    let out = PathBuf::from(cfg.raw("out"));
    create_dir(&out)?;

    let n = match schema {
        Schema::Panel => store.read_all().map(|r| vbill::chunkstore::split_panels(&r).len())?,
        _ => store.n(),
    };
    let m = subsample_size(cfg.raw("m"), n)?;
    let mut settings = VbillSettings::new(m);
    settings.optimizer.draws = cfg.get("draws")?;
    settings.optimizer.source = cfg.get("source")?;
    settings.optimizer.eps_stop = cfg.get("eps-stop")?;
    settings.optimizer.max_iterations = cfg.get("max-iterations")?;
    settings.optimizer.window = cfg.get("window")?;
    settings.optimizer.seed = cfg.get("seed")?;
    settings.optimizer.learning_rate = LearningRate {
        a0: cfg.get("a0")?,
        decay: cfg.get("decay")?,
    };
    settings.optimizer.stop_rule = match cfg.raw("stop-rule") {
        "lower-bound" => StopRule::LowerBound,
        "parameter-average" => StopRule::ParameterAverage,
        other => bail!(ConfigError(format!(
            "unknown stop rule `{other}` (expected lower-bound or parameter-average)"
        ))),
    };
    settings.prior_variance = cfg.get("prior-variance")?;
    settings.init_fraction = cfg.get("init-fraction")?;
    settings.is = ISConfig {
        samples: cfg.get("is-samples")?,
        proposal: proposal_kind(&cfg)?,
        source: cfg.get::<PointSource>("is-source")?,
    };
    let chunked: bool = cfg.get("chunked")?;
    write_file(&out, CONFIG_FILE, cfg.to_text())?;

    log::info!("fitting {} model to {n} units with m = {m}", kind_of(schema));
    let run: VbillRun = if chunked {
        match schema {
            Schema::Logistic => {
                let d = store.manifest().d;
                run_chunked(
                    &store,
                    move |r: &[Vec<f64>]| LogisticRegressionModel::from_covariates(d, &split_logistic(r)),
                    &settings,
                )?
            }
            Schema::Gaussian => {
                let f = if factor.is_empty() { vec![0.0; store.manifest().d] } else { factor.clone() };
                run_chunked(
                    &store,
                    move |r: &[Vec<f64>]| vbill::model::ConjugateGaussianModel::with_factor(r.to_vec(), f.clone()),
                    &settings,
                )?
            }
            Schema::Panel => bail!(ConfigError("chunked fits support logistic and gaussian data only".into())),
        }
    } else {
        match load(&store, schema, &factor)? {
            Dataset::Logistic(model) => run_tractable(&model, &settings)?,
            Dataset::Gaussian(model) => run_tractable(&model, &settings)?,
            Dataset::Panel(model) => run_panel(&model, &settings)?,
        }
    };

    let fingerprint = store.manifest().content;
    let lambda = &run.fit.lambda;
    let names = names_for(schema, lambda.dim());
    let summary = PosteriorSummary::from_lambda(lambda, names.clone(), fingerprint, run.fit.iterations, run.wall_time);
    write_json(
        &out,
        "lambda.json",
        &VbillOutput {
            lambda,
            init: &run.init,
            theta_bar: &run.theta_bar,
            status: run.fit.status,
            iterations: run.fit.iterations,
            m,
            n,
            fingerprint,
        },
    )?;
    let mut trace = String::new();
    for point in &run.fit.trace {
        trace.push_str(&serde_json::to_string(point)?);
        trace.push('\n');
    }
    write_file(&out, "trace.jsonl", trace)?;
    let mut grid = String::from("parameter,x,density\n");
    for g in density_grids(lambda, &names) {
        for (x, p) in g.x.iter().zip(&g.density) {
            let _ = writeln!(grid, "{},{x},{p}", g.name);
        }
    }
    write_file(&out, "density.csv", grid)?;
    write_json(&out, "summary.json", &summary)?;
    let text = summary_text(&summary);
    write_file(&out, "summary.txt", &text)?;
    print!("{text}");
    println!("status {:?}", run.fit.status);
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct ChainReport {
    acceptance_rate: f64,
    burn_in_acceptance_rate: f64,
    mcse: Vec<f64>,
    importance_samples: Option<usize>,
    loglik_variance: Option<f64>,
}

pub fn fit_mcmc(config: Option<PathBuf>, values: Vec<(&'static str, Option<String>)>) -> anyhow::Result<()> {
    let data_dir = data_dir_default();
    let defaults = [
        ("data", data_dir.as_str()),
        ("out", ""),
        ("model", ""),
        ("iterations", "40000"),
        ("burn-in", "10000"),
        ("seed", "0"),
        ("prior-variance", "50"),
        ("start", "mle"),
        ("is-samples", "auto"),
        ("target-variance", "1"),
        ("is-proposal", "laplace"),
        ("factor", ""),
    ];
    let mut cfg = Resolved::new(&defaults, config.as_deref(), values)?;
    let data = PathBuf::from(cfg.raw("data"));
    let store = open_store(&data)?;
    let schema = model_kind(&mut cfg, &store)?;
    let factor = factor(&mut cfg, &data, schema)?;
    let out = PathBuf::from(cfg.raw("out"));
    create_dir(&out)?;
    let seed: u64 = cfg.get("seed")?;
    let prior = PriorSpec::new(cfg.get("prior-variance")?)?;
    let from_mle = match cfg.raw("start") {
        "mle" => true,
        "zero" => false,
        other => bail!(ConfigError(format!("unknown start `{other}` (expected mle or zero)"))),
    };
    let dataset = load(&store, schema, &factor)?;
    let start = Instant::now();

    let chain_config = |d: usize, mle: Option<&MleResult>| -> anyhow::Result<ChainConfig> {
        let mut c = ChainConfig::new(vec![0.0; d], seed);
        c.iterations = cfg.get("iterations")?;
        c.burn_in = cfg.get("burn-in")?;
        if let Some(mle) = mle {
            c.initial = mle.theta.clone();
            c.initial_proposal = proposal_from_information(&mle.information, d)?;
        }
        Ok(c)
    };

    let (chain, chain_cfg, tuned) = match &dataset {
        Dataset::Logistic(_) | Dataset::Gaussian(_) => {
            let model: &dyn Model = match &dataset {
                Dataset::Logistic(m) => m,
                Dataset::Gaussian(m) => m,
                Dataset::Panel(_) => unreachable!(),
            };
            let d = model.dim();
            let mle = if from_mle {
                let all: Vec<usize> = (0..model.n_obs()).collect();
                Some(subsample_mle(model, &all, &vec![0.0; d])?)
            } else {
                None
            };
            let c = chain_config(d, mle.as_ref())?;
            let out = adaptive_rw_mh(|t| Ok(full_loglik(model, t)? + prior.log_density(t)), &c)?;
            (out, c, None)
        }
        Dataset::Panel(model) => {
            let d = LatentModel::dim(model);
            let all: Vec<usize> = (0..model.n_panels()).collect();
            let key = StreamKey::new(seed).child(u64::MAX);
            let mle = simulated_mle(model, &all, &vec![0.0; d], &ISConfig::default(), key.child(0))?;
            let base = ISConfig {
                samples: 2,
                proposal: proposal_kind(&cfg)?,
                source: PointSource::Mc,
            };
            let tuned = if cfg.raw("is-samples") == "auto" {
                tune_is_samples(model, &mle.theta, cfg.get("target-variance")?, &base, key.child(1))?
            } else {
                let samples: usize = cfg.get("is-samples")?;
                let is = ISConfig { samples, ..base };
                vbill::mcmc::TunedSamples {
                    samples,
                    variance: vbill::mcmc::loglik_estimate_variance(model, &mle.theta, &is, 50, key.child(1))?,
                }
            };
            log::info!("{} importance samples, log-likelihood variance {:.3}", tuned.samples, tuned.variance);
            let is = ISConfig {
                samples: tuned.samples,
                ..base
            };
            let c = chain_config(d, from_mle.then_some(&mle))?;
            let out = pmmh(|t, k| total_loglik_is(model, t, &is, k), |t| prior.log_density(t), &c)?;
            (out, c, Some(tuned))
        }
    };
    let wall = start.elapsed().as_secs_f64();
    write_file(&out, CONFIG_FILE, cfg.to_text())?;
    write_draws(&out.join("draws.bin"), &chain, &chain_cfg)?;
    let names = names_for(schema, chain.dim);
    let summary = PosteriorSummary::from_chain(&chain, names, store.manifest().content, chain_cfg.iterations, wall);
    write_json(
        &out,
        "chain.json",
        &ChainReport {
            acceptance_rate: chain.acceptance_rate,
            burn_in_acceptance_rate: chain.burn_in_acceptance_rate,
            mcse: chain.mcse.clone(),
            importance_samples: tuned.map(|t| t.samples),
            loglik_variance: tuned.map(|t| t.variance),
        },
    )?;
    write_json(&out, "summary.json", &summary)?;
    let text = summary_text(&summary);
    write_file(&out, "summary.txt", &text)?;
    print!("{text}");
    println!("acceptance rate {:.3}", chain.acceptance_rate);
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn compare_runs(config: Option<PathBuf>, values: Vec<(&'static str, Option<String>)>) -> anyhow::Result<()> {
    let defaults = [("vbill", ""), ("mcmc", ""), ("out", "")];
    let cfg = Resolved::new(&defaults, config.as_deref(), values)?;
    let a: PosteriorSummary = read_json(&PathBuf::from(cfg.get::<String>("vbill")?).join("summary.json"))?;
    let b: PosteriorSummary = read_json(&PathBuf::from(cfg.get::<String>("mcmc")?).join("summary.json"))?;
    let report = compare(&a, &b)?;
    let text = report.render_text();
    if cfg.is_set("out") {
        let out = PathBuf::from(cfg.raw("out"));
        create_dir(&out)?;
        write_file(&out, CONFIG_FILE, cfg.to_text())?;
        write_json(&out, "comparison.json", &report)?;
        write_file(&out, "comparison.txt", &text)?;
    }
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_sizes() {
        assert_eq!(subsample_size("1%", 100_000).unwrap(), 1000);
        assert_eq!(subsample_size("2%", 50).unwrap(), 1);
        assert_eq!(subsample_size("250", 10).unwrap(), 250);
        assert!(subsample_size("0", 10).is_err());
        assert!(subsample_size("150%", 10).is_err());
        assert!(subsample_size("x", 10).is_err());
    }
}
