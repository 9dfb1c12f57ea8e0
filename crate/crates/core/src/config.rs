//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Values may be comma-separated
//! lists where the consumer accepts them (grid specs). Unknown keys are an
//! error.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{McemSettings, PriorConfig};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", idx + 1)))?;
            let key = key.trim().to_ascii_lowercase();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", idx + 1)));
            }
            if entries
                .insert(key.clone(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    idx + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
            })
            .transpose()
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        let item = item.trim();
                        item.parse::<T>().map_err(|_| {
                            Error::Config(format!("cannot parse {key} entry {item:?}"))
                        })
                    })
                    .collect::<Result<Vec<T>>>()
            })
            .transpose()
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }
}

pub const PRIOR_KEYS: [&str; 8] = [
    "nu0",
    "nu1",
    "nu2",
    "nu3",
    "nu4",
    "beta_init",
    "mu_alpha_init",
    "p0_init",
];
pub const MCEM_KEYS: [&str; 5] = ["mc_samples", "burn_in", "max_iters", "tol", "seed"];

pub fn apply_prior(cfg: &FlatConfig, prior: &mut PriorConfig) -> Result<()> {
    let fields: [(&str, &mut f64); 8] = [
        ("nu0", &mut prior.nu0),
        ("nu1", &mut prior.nu1),
        ("nu2", &mut prior.nu2),
        ("nu3", &mut prior.nu3),
        ("nu4", &mut prior.nu4),
        ("beta_init", &mut prior.beta_init),
        ("mu_alpha_init", &mut prior.mu_alpha_init),
        ("p0_init", &mut prior.p0_init),
    ];
    for (key, slot) in fields {
        if let Some(v) = cfg.get(key)? {
            *slot = v;
        }
    }
    Ok(())
}

pub fn apply_mcem(cfg: &FlatConfig, settings: &mut McemSettings) -> Result<()> {
    if let Some(v) = cfg.get("mc_samples")? {
        settings.mc_samples = v;
    }
    if let Some(v) = cfg.get("burn_in")? {
        settings.burn_in = v;
    }
    if let Some(v) = cfg.get("max_iters")? {
        settings.max_iters = v;
    }
    if let Some(v) = cfg.get("tol")? {
        settings.tol = v;
    }
    if let Some(v) = cfg.get("seed")? {
        settings.seed = v;
    }
    Ok(())
}

/// Writes a config in the same format, sorted by key.
pub fn render(entries: &[(String, String)]) -> String {
    let mut sorted: Vec<_> = entries.to_vec();
    sorted.sort();
    sorted.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
