//! Run configuration: one TOML tree merged from built-in defaults, an
//! optional config file, `SEMABR_*` environment variables and command-line
//! overrides, in increasing order of precedence.
//!
//! Environment keys use `__` as the table separator, so
//! `SEMABR_TRAIN__EPOCHS=500` sets `train.epochs`. Values are parsed as TOML
//! literals when possible and taken as strings otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::playback::SessionConfig;
use crate::policies::{MpcConfig, PolicySpec};
use crate::rl::TrainConfig;

pub const ENV_PREFIX: &str = "SEMABR_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("bad override `{0}`: expected KEY=VALUE")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of bandwidth traces.
    pub traces: PathBuf,
    /// Rate-accuracy table; empty selects the bundled table.
    pub table: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// Train manifest; empty means `<out>/train.txt`.
    pub train_manifest: PathBuf,
    /// Test manifest; empty means `<out>/test.txt`.
    pub test_manifest: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            traces: PathBuf::from("traces"),
            table: PathBuf::new(),
            out: PathBuf::from("out"),
            train_manifest: PathBuf::new(),
            test_manifest: PathBuf::new(),
        }
    }
}

impl Paths {
    pub fn train_manifest(&self) -> PathBuf {
        or_default(&self.train_manifest, &self.out, "train.txt")
    }

    pub fn test_manifest(&self) -> PathBuf {
        or_default(&self.test_manifest, &self.out, "test.txt")
    }
}

fn or_default(p: &Path, out: &Path, name: &str) -> PathBuf {
    if p.as_os_str().is_empty() {
        out.join(name)
    } else {
        p.to_path_buf()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    /// Fraction of traces assigned to training.
    pub fraction: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self { fraction: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for splitting, initialization and sampling. Overrides
    /// `train.seed`.
    pub seed: u64,
    pub paths: Paths,
    pub session: SessionConfig,
    pub train: TrainConfig,
    pub mpc: MpcConfig,
    pub split: SplitSettings,
    /// Schemes evaluated by `compare`, in report order.
    pub schemes: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            session: SessionConfig::default(),
            train: TrainConfig::default(),
            mpc: MpcConfig::default(),
            split: SplitSettings::default(),
            schemes: ["fixed:0", "fixed:1", "fixed:2", "fixed:3", "bb", "mpc"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl RunConfig {
    /// Training settings with the root seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Scheme specs in declared order. `mpc` without parameters takes the
    /// `[mpc]` table.
    pub fn scheme_specs(&self) -> Result<Vec<PolicySpec>, ConfigError> {
        self.schemes
            .iter()
            .map(|s| {
                let spec: PolicySpec = s
                    .parse()
                    .map_err(|e| ConfigError::Invalid(format!("scheme `{s}`: {e}")))?;
                Ok(match spec {
                    PolicySpec::Mpc(_) if s.trim() == "mpc" => PolicySpec::Mpc(self.mpc),
                    other => other,
                })
            })
            .collect()
    }

    /// Checks value ranges. Paths are checked by the commands that use them.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.session.validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.mpc.validate().map_err(|e| invalid(&e))?;
        if !(self.split.fraction > 0.0 && self.split.fraction <= 1.0) {
            return Err(ConfigError::Invalid("split.fraction must lie in (0, 1]".into()));
        }
        self.scheme_specs()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Merges the layers and deserializes. `env` holds raw `(name, value)`
    /// pairs; names without the `SEMABR_` prefix are ignored. `overrides`
    /// are dotted `key=value` assignments applied last.
    pub fn resolve(
        file: Option<&Path>,
        env: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let mut tree = Value::try_from(Self::default())
            .expect("defaults serialize")
            .as_table()
            .cloned()
            .expect("config is a table");
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let parsed: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
                origin: path.display().to_string(),
                message: e.to_string(),
            })?;
            merge(&mut tree, parsed);
        }
        let mut env_pairs: Vec<(String, String)> = env
            .iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                Some((rest.to_ascii_lowercase().replace("__", "."), v.clone()))
            })
            .collect();
        env_pairs.sort();
        for (key, value) in env_pairs.iter().chain(overrides) {
            set_path(&mut tree, key, parse_literal(value));
        }
        let cfg: Self = Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse {
                origin: "merged configuration".into(),
                message: e.to_string(),
            })?;
        Ok(cfg)
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(ConfigError::BadOverride(s.to_string())),
    }
}

fn parse_literal(raw: &str) -> Value {
    // parse as the right-hand side of a one-line document
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(tree: &mut Table, dotted: &str, value: Value) {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut node = tree;
    for p in parts {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        node = entry.as_table_mut().unwrap();
    }
    node.insert(last.to_string(), value);
}
