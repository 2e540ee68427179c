//! Run configuration: a TOML file plus `--set section.key=value` overrides.

use std::path::Path;

use dmgin_core::baseline::BaselineConfig;
use dmgin_core::cmrlm::{PretrainConfig, TowerConfig};
use dmgin_core::datagen::GenConfig;
use dmgin_core::experiment::ExperimentConfig;
use dmgin_core::idecm::KMeansConfig;
use dmgin_core::model::ModelConfig;
use dmgin_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    /// Candidates scored per request in the latency benchmark.
    pub candidates: usize,
    pub repeats: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            candidates: 1024,
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: GenConfig,
    pub tower: TowerConfig,
    pub pretrain: PretrainConfig,
    pub kmeans: KMeansConfig,
    pub model: ModelConfig,
    pub baseline: BaselineConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub warm_start: bool,
    pub warm_start_scale: f64,
    pub user_embeddings: bool,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            data: e.data,
            tower: e.tower,
            pretrain: e.pretrain,
            kmeans: e.kmeans,
            model: e.model,
            baseline: e.baseline,
            train: e.train,
            seeds: e.seeds,
            warm_start: e.warm_start,
            warm_start_scale: e.warm_start_scale,
            user_embeddings: e.user_embeddings,
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            data: self.data.clone(),
            tower: self.tower.clone(),
            pretrain: self.pretrain.clone(),
            kmeans: self.kmeans,
            model: self.model.clone(),
            baseline: self.baseline.clone(),
            train: self.train.clone(),
            seeds: self.seeds.clone(),
            warm_start: self.warm_start,
            warm_start_scale: self.warm_start_scale,
            user_embeddings: self.user_embeddings,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Read(String),
    Parse(String),
    Override(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Read(m) => write!(f, "cannot read config: {m}"),
            ConfigError::Parse(m) => write!(f, "invalid config: {m}"),
            ConfigError::Override(m) => write!(f, "invalid override: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot-separated) inside `table`, creating sections as needed.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(format!("{assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(format!("bad key {path:?}")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{k} is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read(format!("{}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| ConfigError::Parse(e.to_string()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    RunConfig::deserialize(Value::Table(table)).map_err(|e| ConfigError::Parse(e.to_string()))
}
