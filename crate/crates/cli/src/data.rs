//! Loading chunked datasets into models.

use std::path::Path;

use anyhow::{bail, Context};

use vbill::chunkstore::{split_logistic, split_panels, ChunkStore, Schema};
use vbill::model::{ConjugateGaussianModel, LogisticRegressionModel, PanelLogisticModel};

use crate::config::{parse_text, ConfigError};

/// Sidecar with the generating parameters of a simulated dataset.
pub const TRUTH_FILE: &str = "truth.txt";
/// Resolved configuration echoed into every output directory.
pub const CONFIG_FILE: &str = "config.txt";

pub enum Dataset {
    Logistic(LogisticRegressionModel),
    Panel(PanelLogisticModel),
    Gaussian(ConjugateGaussianModel),
}

/// Model kind named in configurations; matches the schema tag.
pub fn kind_of(schema: Schema) -> &'static str {
    match schema {
        Schema::Logistic => "logistic",
        Schema::Panel => "panel",
        Schema::Gaussian => "gaussian",
    }
}

pub fn parse_kind(s: &str) -> Result<Schema, ConfigError> {
    match s {
        "logistic" => Ok(Schema::Logistic),
        "panel" => Ok(Schema::Panel),
        "gaussian" => Ok(Schema::Gaussian),
        other => Err(ConfigError(format!(
            "unknown model `{other}` (expected logistic, panel or gaussian)"
        ))),
    }
}

pub fn open_store(dir: &Path) -> anyhow::Result<ChunkStore> {
    if dir.as_os_str().is_empty() {
        bail!(ConfigError(
            "no dataset directory: pass --data or set VBILL_DATA_DIR".into()
        ));
    }
    ChunkStore::open(dir).with_context(|| format!("opening dataset {}", dir.display()))
}

/// Reads the `factor` entry of a dataset's truth sidecar, if any.
pub fn recorded_factor(dir: &Path) -> anyhow::Result<Option<Vec<f64>>> {
    let path = dir.join(TRUTH_FILE);
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Ok(None);
    };
    let fields = parse_text(&text)?;
    match fields.get("factor") {
        None => Ok(None),
        Some(v) => Ok(Some(
            v.split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| ConfigError(format!("{}: bad factor `{v}`", path.display())))?,
        )),
    }
}

/// Builds the model for `store`. Gaussian data needs the observation factor
/// (zeros give unit covariance).
pub fn load(store: &ChunkStore, kind: Schema, factor: &[f64]) -> anyhow::Result<Dataset> {
    let manifest = store.manifest();
    if kind != manifest.schema {
        bail!(ConfigError(format!(
            "model `{}` does not fit a {} dataset",
            kind_of(kind),
            manifest.schema
        )));
    }
    let rows = store.read_all()?;
    let d = manifest.d;
    Ok(match kind {
        Schema::Logistic => Dataset::Logistic(LogisticRegressionModel::from_covariates(d, &split_logistic(&rows))?),
        Schema::Panel => Dataset::Panel(PanelLogisticModel::from_covariates(d, &split_panels(&rows))?),
        Schema::Gaussian => {
            let factor = if factor.is_empty() { vec![0.0; d] } else { factor.to_vec() };
            if factor.len() != d {
                bail!(ConfigError(format!("factor has {} entries, data have {d} coordinates", factor.len())));
            }
            Dataset::Gaussian(ConjugateGaussianModel::with_factor(rows, factor)?)
        }
    })
}

pub fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(dir, name, text)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    if dir.as_os_str().is_empty() {
        bail!(ConfigError("no output directory: pass --out".into()));
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
