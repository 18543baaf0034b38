//! `key=value` run configuration: built-in defaults, then an optional file,
//! then command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Configuration problems (unknown keys, unparsable values).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("line {}: expected key=value, found `{line}`", i + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(ConfigError(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    values: BTreeMap<String, String>,
}

impl Resolved {
    /// `defaults` lists every accepted key. An empty default means "unset".
    pub fn new(
        defaults: &[(&str, &str)],
        file: Option<&Path>,
        flags: Vec<(&str, Option<String>)>,
    ) -> anyhow::Result<Self> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::Error::new(e).context(format!("reading config {}", path.display())))?;
            for (k, v) in parse_text(&text)? {
                if !values.contains_key(&k) {
                    return Err(ConfigError(format!("{}: unknown key `{k}`", path.display())).into());
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            debug_assert!(values.contains_key(k), "flag {k} has no default");
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Resolved { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Err(ConfigError(format!("`{key}` is required")));
        }
        raw.parse()
            .map_err(|e| ConfigError(format!("`{key}`: cannot parse `{raw}`: {e}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        if self.is_set(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Comma-separated reals; empty when unset.
    pub fn list(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        if !self.is_set(key) {
            return Ok(vec![]);
        }
        self.raw(key)
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| ConfigError(format!("`{key}`: `{v}` is not a number")))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULTS: &[(&str, &str)] = &[("m", "100"), ("seed", "0"), ("out", "")];

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nm = 250\nseed=3\n").unwrap();
        let r = Resolved::new(DEFAULTS, Some(&path), vec![("seed", Some("9".into())), ("m", None)]).unwrap();
        assert_eq!(r.get::<usize>("m").unwrap(), 250);
        assert_eq!(r.get::<u64>("seed").unwrap(), 9);
        assert!(!r.is_set("out"));
        assert!(r.get::<String>("out").is_err());
        assert_eq!(r.to_text(), "m=250\nout=\nseed=9\n");
        assert_eq!(parse_text(&r.to_text()).unwrap().len(), 3);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(parse_text("m").is_err());
        assert!(parse_text("m=1\nm=2").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "bogus=1\n").unwrap();
        assert!(Resolved::new(DEFAULTS, Some(&path), vec![]).is_err());
    }

    #[test]
    fn lists() {
        let r = Resolved::new(&[("beta", "1, -2.5,3")], None, vec![]).unwrap();
        assert_eq!(r.list("beta").unwrap(), vec![1.0, -2.5, 3.0]);
        assert_eq!(join(&[1.0, -2.5]), "1,-2.5");
    }
}
