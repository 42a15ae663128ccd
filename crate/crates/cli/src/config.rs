//! Flat `key = value` pipeline configuration.
//!
//! Keys are namespaced by the stage that reads them (`encode.epochs`,
//! `quantize.grids`, ...); `seed` and `out_dir` are global. Precedence, low
//! to high: built-in defaults, config file, `SIDFORGE_SEED`, command-line
//! overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use sidforge_core::derive_seed;

pub const SEED_ENV: &str = "SIDFORGE_SEED";

/// Every key with its default. An empty default means "unset".
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out_dir", "sidforge-out"),
    ("ingest.input", ""),
    ("ingest.delimiter", ","),
    ("ingest.col_user", "user"),
    ("ingest.col_poi", "poi"),
    ("ingest.col_category", "category"),
    ("ingest.col_timestamp", "timestamp"),
    ("ingest.col_lat", "lat"),
    ("ingest.col_lon", "lon"),
    ("ingest.delta_hours", "24"),
    ("ingest.min_poi_visits", "10"),
    ("ingest.min_user_records", "10"),
    ("ingest.ratios", "0.8,0.1,0.1"),
    ("ingest.synth_clusters", "4"),
    ("ingest.synth_users", "60"),
    ("ingest.synth_pois", "120"),
    ("ingest.synth_days", "90"),
    ("ingest.seed", ""),
    ("featurize.plus_code_len", "6"),
    ("featurize.tz_offset_secs", "0"),
    ("featurize.top_slots", "10"),
    ("featurize.top_visitors", "10"),
    ("encode.enabled", "true"),
    ("encode.hidden", "256"),
    ("encode.dim", "64"),
    ("encode.tau", "0.1"),
    ("encode.noise", "0.1"),
    ("encode.batch", "128"),
    ("encode.lr", "0.01"),
    ("encode.epochs", "50"),
    ("encode.seed", ""),
    ("quantize.grids", "4x6,4x6,8x8,8x8"),
    ("quantize.epochs", "50"),
    ("quantize.batch", "256"),
    ("quantize.init_scale", "0.1"),
    ("quantize.seed", ""),
    ("continuity.space", ""),
    ("continuity.coords", "layer1"),
    ("continuity.samples", "1000"),
    ("continuity.seed", ""),
    ("prompts.k", "10"),
    ("prompts.history_cap", "200"),
    ("prompts.tz_offset_secs", "0"),
    ("score.completions", ""),
    ("score.weights", "default"),
    ("score.k", "10"),
    ("score.target_len", "512"),
    ("simulate.env", "synth:50x20"),
    ("simulate.steps", "500"),
    ("simulate.group", "8"),
    ("simulate.weights", "default"),
    ("simulate.lr", "0.1"),
    ("simulate.kl", "0.01"),
    ("simulate.temperature", "1"),
    ("simulate.kl_mode", "natural"),
    ("simulate.with_replacement", "false"),
    ("simulate.eval_every", "50"),
    ("simulate.eval_draws", "100"),
    ("simulate.seed", ""),
    ("evaluate.ks", "1,5,10"),
    ("evaluate.mrr_k", "10"),
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("config key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: "--set".into(),
            value: pair.into(),
        })?;
        self.set(k.trim(), v)
    }

    /// Applies a file of `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.into(),
                line: i + 1,
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Reads `SIDFORGE_SEED` if set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.get_parsed::<u64>(SEED_ENV, v.trim())?;
            self.set("seed", &v)?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("undeclared config key {key}"))
    }

    /// The value, or `None` when it is empty.
    pub fn opt(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    fn get_parsed<T: FromStr>(&self, key: &str, value: &str) -> Result<T, ConfigError> {
        value.parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
        })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.get_parsed(key, self.raw(key))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError> {
        self.raw(key)
            .split(',')
            .map(|v| self.get_parsed(key, v.trim()))
            .collect()
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out_dir"))
    }

    /// Seed of `stage`: its own `<stage>.seed` if given, otherwise a named
    /// sub-seed of the master seed.
    pub fn stage_seed(&self, stage: &str) -> Result<u64, ConfigError> {
        let key = format!("{stage}.seed");
        match self.values.get(&key).filter(|v| !v.is_empty()) {
            Some(v) => self.get_parsed(&key, v),
            None => Ok(derive_seed(self.get("seed")?, stage)),
        }
    }

    /// The keys a stage reads, with its effective seed if it draws any
    /// randomness.
    pub fn stage_values(&self, stage: &str) -> Result<BTreeMap<String, String>, ConfigError> {
        let prefix = format!("{stage}.");
        let seed_key = format!("{stage}.seed");
        let mut out: BTreeMap<String, String> = self
            .values
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix) && **k != seed_key)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if self.values.contains_key(&seed_key) {
            out.insert(seed_key, self.stage_seed(stage)?.to_string());
        }
        Ok(out)
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// SHA-256 over a stage's name, version, upstream digests and own values.
pub fn stage_digest(stage: &str, version: u32, upstream: &[&str], values: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    h.update(format!("{stage}\nv{version}\n"));
    for u in upstream {
        h.update(format!("up {u}\n"));
    }
    for (k, v) in values {
        h.update(format!("{k}={v}\n"));
    }
    hex::encode(h.finalize())
}
