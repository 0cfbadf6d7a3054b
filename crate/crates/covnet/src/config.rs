//! `key = value` experiment configs with per-command key schemas.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Accepted keys of one subcommand and their defaults (`None`: no default).
pub struct Schema {
    pub command: &'static str,
    pub keys: &'static [(&'static str, Option<&'static str>)],
}

const COMMON: &[(&str, Option<&str>)] = &[("seed", Some("0")), ("out", Some("."))];

impl Schema {
    fn all_keys(&self) -> impl Iterator<Item = &(&'static str, Option<&'static str>)> {
        COMMON.iter().chain(self.keys.iter())
    }

    fn knows(&self, key: &str) -> bool {
        self.all_keys().any(|(k, _)| *k == key)
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Config {
    command: &'static str,
    order: Vec<&'static str>,
    values: BTreeMap<String, String>,
}

fn parse_assignment(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = parse_assignment(line).ok_or_else(|| {
            Error::Config(format!(
                "{origin}:{}: expected `key = value`, found `{line}`",
                i + 1
            ))
        })?;
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!(
                "{origin}:{}: duplicate key `{k}`",
                i + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl Config {
    /// Defaults, then the config file, then `--set`, then `--seed`/`--out`.
    pub fn resolve(schema: &Schema, ov: &Overrides) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (k, d) in schema.all_keys() {
            if let Some(d) = d {
                values.insert(k.to_string(), d.to_string());
            }
        }
        let mut apply = |k: &str, v: &str, origin: &str| -> Result<()> {
            if !schema.knows(k) {
                return Err(Error::Config(format!(
                    "{origin}: unknown key `{k}` for `{}`",
                    schema.command
                )));
            }
            values.insert(k.to_string(), v.to_string());
            Ok(())
        };
        if let Some(path) = &ov.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let origin = path.display().to_string();
            for (k, v) in parse_config_text(&text, &origin)? {
                apply(&k, &v, &origin)?;
            }
        }
        for s in &ov.set {
            let (k, v) = parse_assignment(s)
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
            apply(k, v, "--set")?;
        }
        if let Some(seed) = ov.seed {
            values.insert("seed".into(), seed.to_string());
        }
        if let Some(out) = &ov.out {
            values.insert("out".into(), out.display().to_string());
        }
        Ok(Self {
            command: schema.command,
            order: schema.all_keys().map(|(k, _)| *k).collect(),
            values,
        })
    }

    pub fn command(&self) -> &'static str {
        self.command
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("invalid value `{v}` for key `{key}`: {e}"))),
        }
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn positive(&self, key: &str) -> Result<usize> {
        let v: usize = self.parse_required(key)?;
        if v == 0 {
            return Err(Error::Config(format!(
                "key `{key}` must be positive, got 0"
            )));
        }
        Ok(v)
    }

    pub fn positive_opt(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.positive(key).map(Some),
        }
    }

    pub fn real(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse_required(key)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("key `{key}` must be finite")));
        }
        Ok(v)
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse_required("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out").unwrap_or("."))
    }

    /// Path of an output file named by `key`, relative to the output directory.
    pub fn out_path(&self, key: &str) -> Result<PathBuf> {
        Ok(self.out_dir().join(self.require(key)?))
    }

    pub fn render(&self) -> String {
        let mut s = format!("# resolved configuration for `covnet {}`\n", self.command);
        for k in &self.order {
            if let Some(v) = self.values.get(*k) {
                writeln!(s, "{k} = {v}").unwrap();
            }
        }
        s
    }

    /// Creates the output directory and writes `<command>.resolved.cfg` into it.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        let dir = self.out_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{}.resolved.cfg", self.command));
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Splits a comma-separated list, dropping empty items.
pub fn split_list(s: &str) -> Vec<&str> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}
