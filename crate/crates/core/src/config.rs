//! Experiment configuration: a TOML document with one section per component,
//! plus overrides of any key through `BLAC__SECTION__KEY=value` variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::trainer::TrainConfig;

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "BLAC__";

const SECTIONS: [&str; 7] = ["run", "train", "env", "agent", "backup", "trigger", "gp"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config section `{0}`")]
    UnknownSection(String),
    #[error("bad override `{key}`: {reason}")]
    Override { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub label: String,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Episodes between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { label: "blac".into(), out_dir: PathBuf::from("runs/blac"), seeds: vec![0], checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

/// One `key.path = value` assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    /// Parses a dotted key (`agent.lr_policy`) and a raw value. Raw values
    /// are read as TOML (`3e-4`, `true`, `[1, 2]`, `"x"`), falling back to a
    /// bare string.
    pub fn parse(key: &str, raw: &str) -> Result<Self, ConfigError> {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::Override { key: key.into(), reason: "empty key segment".into() });
        }
        Ok(Self { path, value: parse_value(raw) })
    }

    /// Reads `BLAC__AGENT__LR_POLICY=...` style variables; names are
    /// case-insensitive and `__` separates path segments.
    pub fn from_env_var(name: &str, raw: &str) -> Option<Result<Self, ConfigError>> {
        let rest = name.strip_prefix(ENV_PREFIX)?;
        let key = rest.split("__").map(str::to_ascii_lowercase).collect::<Vec<_>>().join(".");
        Some(Self::parse(&key, raw))
    }

    pub fn key(&self) -> String {
        self.path.join(".")
    }

    pub fn apply(&self, table: &mut Table) -> Result<(), ConfigError> {
        let err = |reason: String| ConfigError::Override { key: self.key(), reason };
        let (last, parents) = self.path.split_last().expect("nonempty path");
        let mut cur = table;
        for p in parents {
            let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
            cur = entry.as_table_mut().ok_or_else(|| err(format!("`{p}` is not a table")))?;
        }
        cur.insert(last.clone(), self.value.clone());
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    run: RunConfig,
}

/// Deserialises through the text form so errors carry the offending key
/// and line.
fn parse_section<T: serde::de::DeserializeOwned>(table: &Table) -> Result<T, ConfigError> {
    toml::from_str(&table.to_string()).map_err(|e| ConfigError::Parse(e.to_string()))
}

fn parse_value(raw: &str) -> Value {
    let trimmed = raw.trim();
    match format!("v = {trimmed}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(trimmed.into())),
        Err(_) => Value::String(trimmed.into()),
    }
}

/// Collects overrides from `(name, value)` pairs such as `std::env::vars()`,
/// sorted by name so the result does not depend on iteration order.
pub fn env_overrides<I>(vars: I) -> Result<Vec<Override>, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut found: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    found.sort();
    found.iter().filter_map(|(k, v)| Override::from_env_var(k, v)).collect()
}

impl ExperimentConfig {
    /// Parses, applies `overrides` in order, and validates.
    pub fn from_toml_str(text: &str, overrides: &[Override]) -> Result<Self, ConfigError> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            o.apply(&mut table)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self, ConfigError> {
        if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(ConfigError::UnknownSection(k.clone()));
        }
        let mut table = table;
        let run = match table.remove("run") {
            Some(v) => {
                let mut t = Table::new();
                t.insert("run".into(), v);
                parse_section::<RunSection>(&t)?.run
            }
            None => RunConfig::default(),
        };
        let cfg = Self { run, train: parse_section(&table)? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[Override]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("run.seeds must not be empty".into()));
        }
        let mut seen = self.run.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.run.seeds.len() {
            return Err(ConfigError::Invalid("run.seeds contains duplicates".into()));
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// A copy with `overrides` applied on top of this config.
    pub fn with_overrides(&self, overrides: &[Override]) -> Result<Self, ConfigError> {
        let mut table = Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            o.apply(&mut table)?;
        }
        Self::from_table(table)
    }
}
