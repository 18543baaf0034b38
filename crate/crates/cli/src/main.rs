//! `vbill`: simulate datasets, chunk them, fit VBILL and MCMC baselines, and
//! compare the results.
//!
//! Every command accepts `--config FILE` with `key=value` lines; flags win
//! over the file. The fully resolved configuration is written to
//! `config.txt` in the output directory and can be replayed with `--config`.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vbill::VbillError;

#[derive(Parser)]
#[command(name = "vbill", version, about = "Variational Bayes with intractable or subsampled likelihoods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a logistic, random-intercept panel or Gaussian dataset.
    Simulate(SimulateArgs),
    /// Re-chunk a dataset directory or import a CSV file.
    Chunk(ChunkArgs),
    /// Fit the variational approximation.
    FitVbill(FitVbillArgs),
    /// Run the MCMC baseline (random-walk MH, or pseudo-marginal MH for panels).
    FitMcmc(FitMcmcArgs),
    /// Compare a VBILL result directory against an MCMC result directory.
    Compare(CompareArgs),
}

/// Declares an argument struct whose optional string flags map to config keys.
macro_rules! keyed_args {
    ($name:ident { $( $(#[$doc:meta])* $field:ident => $key:literal ),* $(,)? }) => {
        #[derive(Args)]
        struct $name {
            /// key=value configuration file; flags override it.
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                $(#[$doc])*
                #[arg(long = $key)]
                $field: Option<String>,
            )*
        }

        impl $name {
            fn split(self) -> (Option<PathBuf>, Vec<(&'static str, Option<String>)>) {
                (self.config, vec![$(($key, self.$field)),*])
            }
        }
    };
}

keyed_args!(SimulateArgs {
    /// logistic, panel or gaussian [default: logistic]
    kind => "kind",
    /// Observations (panels for panel data) [default: 10000]
    n => "n",
    /// [default: 0]
    seed => "seed",
    /// Output dataset directory [default: $VBILL_DATA_DIR]
    out => "out",
    /// [default: 100000]
    rows_per_chunk => "rows-per-chunk",
    /// Shuffle rows (whole panels) with this seed before chunking
    shuffle => "shuffle",
    /// Comma-separated coefficients, intercept first
    beta => "beta",
    /// Log variance of the random intercept [default: 0.41]
    gamma => "gamma",
    /// Observations per panel [default: 5]
    t => "t",
    /// Gaussian mean vector [default: 0.5,-0.5]
    mean => "mean",
    /// Gaussian covariance factor v in I + vv' [default: 1,0.5]
    factor => "factor",
});

keyed_args!(ChunkArgs {
    /// Dataset directory or CSV file with a header
    input => "input",
    /// Output dataset directory
    out => "out",
    /// LOGISTIC, PANEL or GAUSSIAN (CSV input only)
    schema => "schema",
    /// [default: 100000]
    rows_per_chunk => "rows-per-chunk",
    /// Shuffle rows (whole panels) with this seed
    shuffle => "shuffle",
});

keyed_args!(FitVbillArgs {
    /// Dataset directory [default: $VBILL_DATA_DIR]
    data => "data",
    /// Result directory
    out => "out",
    /// logistic, panel or gaussian [default: from the dataset]
    model => "model",
    /// Subsample size, a count or a percentage [default: 1%]
    m => "m",
    /// Draws per iteration [default: 256]
    draws => "draws",
    /// mc or rqmc [default: rqmc]
    source => "source",
    /// Stopping threshold on the scaled lower bound [default: 1e-7]
    eps_stop => "eps-stop",
    /// [default: 1000]
    max_iterations => "max-iterations",
    /// Stopping window [default: 5]
    window => "window",
    /// [default: 0]
    seed => "seed",
    /// Prior variance [default: 50]
    prior_variance => "prior-variance",
    /// Initial learning rate [default: 0.1]
    a0 => "a0",
    /// Learning-rate decay constant [default: 50]
    decay => "decay",
    /// Fraction of the data used for the initial MLE [default: 0.3]
    init_fraction => "init-fraction",
    /// lower-bound or parameter-average [default: lower-bound]
    stop_rule => "stop-rule",
    /// Importance samples per panel [default: 256]
    is_samples => "is-samples",
    /// laplace or prior [default: laplace]
    is_proposal => "is-proposal",
    /// mc or rqmc [default: rqmc]
    is_source => "is-source",
    /// Gaussian covariance factor [default: from truth.txt]
    factor => "factor",
    /// Stream the data from the chunk store (logistic, gaussian) [default: false]
    chunked => "chunked",
});

keyed_args!(FitMcmcArgs {
    /// Dataset directory [default: $VBILL_DATA_DIR]
    data => "data",
    /// Result directory
    out => "out",
    /// logistic, panel or gaussian [default: from the dataset]
    model => "model",
    /// Total iterations including burn-in [default: 40000]
    iterations => "iterations",
    /// [default: 10000]
    burn_in => "burn-in",
    /// [default: 0]
    seed => "seed",
    /// Prior variance [default: 50]
    prior_variance => "prior-variance",
    /// mle or zero [default: mle]
    start => "start",
    /// Importance samples per panel, or auto [default: auto]
    is_samples => "is-samples",
    /// Target variance of the log-likelihood estimate for auto [default: 1]
    target_variance => "target-variance",
    /// laplace or prior [default: laplace]
    is_proposal => "is-proposal",
    /// Gaussian covariance factor [default: from truth.txt]
    factor => "factor",
});

keyed_args!(CompareArgs {
    /// VBILL result directory
    vbill => "vbill",
    /// MCMC result directory
    mcmc => "mcmc",
    /// Optional directory for comparison.json and comparison.txt
    out => "out",
});

fn category(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(v) = cause.downcast_ref::<VbillError>() {
            return v.category();
        }
        if let Some(a) = cause.downcast_ref::<vbill::optimizer::FitAbort>() {
            return a.error.category();
        }
        if cause.is::<config::ConfigError>() {
            return "config";
        }
        if cause.is::<serde_json::Error>() {
            return "data";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => {
            let (c, v) = a.split();
            commands::simulate(c, v)
        }
        Command::Chunk(a) => {
            let (c, v) = a.split();
            commands::chunk(c, v)
        }
        Command::FitVbill(a) => {
            let (c, v) = a.split();
            commands::fit_vbill(c, v)
        }
        Command::FitMcmc(a) => {
            let (c, v) = a.split();
            commands::fit_mcmc(c, v)
        }
        Command::Compare(a) => {
            let (c, v) = a.split();
            commands::compare_runs(c, v)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", category(&e));
            ExitCode::FAILURE
        }
    }
}
