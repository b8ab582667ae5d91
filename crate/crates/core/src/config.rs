//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys may appear once. Each
//! command declares the keys it understands and anything else is rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::InfluenceKernel;
use crate::projections::FeasibleSet;

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, (usize, String)>,
    base_dir: Option<PathBuf>,
}

pub const TRACK_KEYS: &[&str] = &[
    "p", "T", "delta", "kernel", "W", "mu_bar", "eta0", "schedule", "lambda_min", "lambda_max", "window",
    "tune_eta0",
];

pub const LEARN_KEYS: &[&str] = &[
    "p", "T", "delta", "kernel", "W0", "mu_bar", "eta0", "schedule", "lambda_min", "lambda_max", "window",
    "tune_eta0", "rho0", "rho_schedule", "feasible_set", "l1_penalty", "learn_mu", "snapshot_every", "method",
];

pub const SIMULATE_KEYS: &[&str] =
    &["p", "T", "kernel", "W", "mu_bar", "network", "block_size", "max_events", "network_seed"];

pub const BATCH_KEYS: &[&str] = &["p", "T", "delta", "kernel", "mu_bar", "gamma", "max_outer", "max_line_search", "tol", "W0"];

pub const FORECAST_KEYS: &[&str] = LEARN_KEYS;

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: line_no, msg: format!("expected `key = value`, got `{line}`") })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Parse { line: line_no, msg: "empty key".into() });
            }
            if values.insert(k.to_string(), (line_no, v.to_string())).is_some() {
                return Err(Error::Parse { line: line_no, msg: format!("duplicate key `{k}`") });
            }
        }
        Ok(Self { values, base_dir: None })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::config(format!("{}:{line}: {msg}", path.display())),
            e => e,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), (0, value.into()));
    }

    pub fn ensure_known(&self, allowed: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.values {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::config(format!("line {line}: unknown key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(_, v)| v.as_str())
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::config(format!("line {line}: `{key}` should be {what}, got `{v}`"))),
        }
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.typed(key, "a number")
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>> {
        self.typed(key, "a nonnegative integer")
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.typed(key, "a nonnegative integer")
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>> {
        self.typed(key, "true or false")
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some((line, v)) = self.values.get(key) else { return Ok(None) };
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("line {line}: `{key}` entry `{s}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn path(&self, v: &str) -> PathBuf {
        let p = PathBuf::from(v);
        match (&self.base_dir, p.is_relative()) {
            (Some(b), true) => b.join(p),
            _ => p,
        }
    }

    pub fn kernel(&self) -> Result<Option<InfluenceKernel>> {
        self.str("kernel").map(|s| InfluenceKernel::parse(s, self.base_dir())).transpose()
    }

    pub fn feasible_set(&self) -> Result<Option<FeasibleSet>> {
        self.str("feasible_set").map(|s| FeasibleSet::parse(s, self.base_dir())).transpose()
    }

    /// A dense CSV matrix referenced by file name.
    pub fn matrix(&self, key: &str) -> Result<Option<DMatrix<f64>>> {
        self.str(key).map(|v| crate::io::read_matrix(&self.path(v))).transpose()
    }

    /// `mu_bar` as a scalar (repeated `p` times), a comma list, or a file.
    pub fn mu_bar(&self, p: Option<usize>) -> Result<Option<DVector<f64>>> {
        let Some(v) = self.str("mu_bar") else { return Ok(None) };
        let mu = if let Ok(x) = v.parse::<f64>() {
            let p = p.ok_or_else(|| Error::config("scalar mu_bar needs the actor count `p`"))?;
            DVector::from_element(p, x)
        } else if v.contains(',') {
            DVector::from_vec(self.f64_list("mu_bar")?.unwrap_or_default())
        } else {
            crate::io::read_vector(&self.path(v))?
        };
        if let Some(p) = p {
            crate::error::check_dim(p, mu.len())?;
        }
        if mu.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::config("mu_bar entries must be finite and nonnegative"));
        }
        Ok(Some(mu))
    }
}
