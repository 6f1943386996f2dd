//! Layered configuration: built-in defaults, then a JSON config file, then
//! `--set key=value` overrides and subcommand flags, merged as JSON values
//! before being decoded into [`Config`].

use std::fs;
use std::path::Path;

use ilcurate_core::bc::TrainConfig;
use ilcurate_core::coverage::{PbPanel, PsPanel};
use ilcurate_core::harness::{NoiseKind, SweepSpec};
use ilcurate_core::metrics::{NeighborSearch, Norm};
use ilcurate_core::pmobstacle::{EnvConfig, ScriptedExpert};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub env: EnvConfig,
    pub expert: ScriptedExpert,
    pub train: TrainConfig,
    /// Drop failed episodes before `train`.
    pub train_successes_only: bool,
    pub collect: CollectConfig,
    pub metrics: MetricsConfig,
    pub coverage: CoverageConfig,
    pub verify: VerifyConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for Config {
    fn default() -> Self {
        let sweep = SweepSpec::default();
        Self {
            seed: 0,
            env: sweep.env.clone(),
            expert: sweep.expert.clone(),
            train: sweep.train.clone(),
            train_successes_only: true,
            collect: CollectConfig::default(),
            metrics: MetricsConfig::default(),
            coverage: CoverageConfig::default(),
            verify: VerifyConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::from(&sweep),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub episodes: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { episodes: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Cluster radius; scaled to the data when absent.
    pub epsilon: Option<f64>,
    pub norm: Norm,
    pub search: NeighborSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PanelChoice {
    Ps,
    Pb,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub panel: PanelChoice,
    pub ps: PsPanel,
    pub pb: PbPanel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seeds: u64,
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seeds: 1000,
            max_states: 10,
            max_actions: 4,
            max_horizon: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sigma_s: f64,
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigma_s: 0.0,
            episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: NoiseKind,
    pub dataset_sizes: Vec<usize>,
    pub train_sigma_s: Vec<f64>,
    pub train_sigma_p: Vec<f64>,
    pub combined_sigma_s: f64,
    pub eval_sigma_s: Vec<f64>,
    pub repeats: usize,
    pub eval_episodes: usize,
    pub successes_only: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self::from(&SweepSpec::default())
    }
}

impl From<&SweepSpec> for SweepConfig {
    fn from(s: &SweepSpec) -> Self {
        Self {
            kind: NoiseKind::System,
            dataset_sizes: s.dataset_sizes.clone(),
            train_sigma_s: s.train_sigma_s.clone(),
            train_sigma_p: s.train_sigma_p.clone(),
            combined_sigma_s: s.combined_sigma_s,
            eval_sigma_s: s.eval_sigma_s.clone(),
            repeats: s.repeats,
            eval_episodes: s.eval_episodes,
            successes_only: s.successes_only,
        }
    }
}

impl Config {
    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            env: self.env.clone(),
            expert: self.expert.clone(),
            train: self.train.clone(),
            dataset_sizes: self.sweep.dataset_sizes.clone(),
            train_sigma_s: self.sweep.train_sigma_s.clone(),
            train_sigma_p: self.sweep.train_sigma_p.clone(),
            combined_sigma_s: self.sweep.combined_sigma_s,
            eval_sigma_s: self.sweep.eval_sigma_s.clone(),
            repeats: self.sweep.repeats,
            eval_episodes: self.sweep.eval_episodes,
            base_seed: self.seed,
            successes_only: self.sweep.successes_only,
        }
    }

    /// SHA-256 of the canonical (key-sorted) JSON encoding.
    pub fn hash(&self) -> String {
        let json =
            serde_json::to_string(&serde_json::to_value(self).expect("config serializes")).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug)]
pub enum ConfigError {
    /// Malformed override syntax; reported as a usage error.
    Usage(String),
    /// Unreadable file or content that does not decode.
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Usage(m) | ConfigError::Invalid(m) => f.write_str(m),
        }
    }
}

/// Recursively merge `overlay` into `base`; objects merge key by key, anything
/// else replaces.
pub fn deep_merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse `key.path=value`. The value is read as JSON when it parses as JSON,
/// and as a plain string otherwise.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), ConfigError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::Usage(format!("override {s:?} is not of the form key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(ConfigError::Usage(format!("override key {key:?} has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

/// Set the value at a dotted path, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &[String], value: Value) {
    let mut overlay = value;
    for key in path.iter().rev() {
        let mut m = Map::new();
        m.insert(key.clone(), overlay);
        overlay = Value::Object(m);
    }
    deep_merge(root, overlay);
}

/// Defaults, then the config file, then overrides in order.
pub fn resolve(file: Option<&Path>, overrides: &[(Vec<String>, Value)]) -> Result<Config, ConfigError> {
    let mut value = serde_json::to_value(Config::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let file_value: Value =
            serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("config {}: {e}", path.display())))?;
        deep_merge(&mut value, file_value);
    }
    for (path, v) in overrides {
        set_path(&mut value, path, v.clone());
    }
    serde_json::from_value(value).map_err(|e| ConfigError::Invalid(format!("invalid configuration: {e}")))
}
