//! Run configuration files.
//!
//! A config is one JSON object. The `scenario` section names a `preset` and
//! overrides any of its fields; every other section is read directly, with
//! defaults for omitted keys. Unknown keys anywhere are rejected.
//!
//! ```json
//! {
//!   "name": "lite",
//!   "scenario": { "preset": "figure_eight_lite", "episode_len": 300 },
//!   "train": { "n_episode": 200, "eval_every": 1 },
//!   "sgnn": { "filters": 32, "order": 3, "p": 0.7 },
//!   "mixer": { "width": 32 },
//!   "seeds": [0, 1, 2]
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use svmix_core::graph::GraphSpec;
use svmix_core::ppo::NetShape;
use svmix_core::trainer::{MixerConfig, ModelConfig, SgnnConfig, TrainConfig};
use svmix_core::{Model, ScenarioConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config field `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    FigureEight,
    FigureEightLite,
    Merge,
}

impl Preset {
    pub fn scenario(self) -> ScenarioConfig {
        match self {
            Preset::FigureEight => ScenarioConfig::figure_eight(),
            Preset::FigureEightLite => ScenarioConfig::figure_eight_lite(),
            Preset::Merge => ScenarioConfig::merge(),
        }
    }
}

/// Fully resolved configuration of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub preset: Preset,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    name: String,
    #[allow(dead_code)]
    scenario: Value,
    train: TrainConfig,
    sgnn: SgnnConfig,
    mixer: MixerConfig,
    nets: NetShape,
    graph: Option<GraphSpec>,
    seeds: Vec<u64>,
    out_dir: PathBuf,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            name: "run".into(),
            scenario: Value::Null,
            train: TrainConfig::default(),
            sgnn: SgnnConfig::default(),
            mixer: MixerConfig::default(),
            nets: NetShape::default(),
            graph: None,
            seeds: vec![0],
            out_dir: "runs".into(),
        }
    }
}

#[derive(Serialize)]
struct Snapshot<'a> {
    name: &'a str,
    scenario: Value,
    train: &'a TrainConfig,
    sgnn: &'a SgnnConfig,
    mixer: &'a MixerConfig,
    nets: &'a NetShape,
    graph: &'a Option<GraphSpec>,
    seeds: &'a [u64],
    out_dir: &'a Path,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::default())
    }
}

fn parse_err<E: std::fmt::Display>(prefix: &str, e: serde_path_to_error::Error<E>) -> ConfigError {
    let path = e.path().to_string();
    let field = match (prefix.is_empty(), path.as_str()) {
        (true, _) => path.clone(),
        (false, ".") => prefix.to_string(),
        (false, p) => format!("{prefix}.{p}"),
    };
    ConfigError::Parse {
        field,
        message: e.into_inner().to_string(),
    }
}

fn invalid(section: &str, e: svmix_core::Error) -> ConfigError {
    match e {
        svmix_core::Error::InvalidParameter { name, reason } => ConfigError::Invalid {
            field: format!("{section}.{name}"),
            reason,
        },
        other => ConfigError::Invalid {
            field: section.into(),
            reason: other.to_string(),
        },
    }
}

/// Recursively overlays `patch` onto `base`.
fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let raw = RawConfig::default();
        RunConfig {
            name: raw.name,
            preset,
            scenario: preset.scenario(),
            train: raw.train,
            model: ModelConfig::default(),
            seeds: raw.seeds,
            out_dir: raw.out_dir,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let root: Value = serde_path_to_error::deserialize(de).map_err(|e| parse_err("", e))?;
        let raw: RawConfig = serde_path_to_error::deserialize(root.clone()).map_err(|e| parse_err("", e))?;

        let mut section = match root.get("scenario") {
            None | Some(Value::Null) => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => {
                return Err(ConfigError::Parse {
                    field: "scenario".into(),
                    message: "expected an object".into(),
                })
            }
        };
        let preset = match section.remove("preset") {
            None => Preset::default(),
            Some(v) => serde_path_to_error::deserialize(v).map_err(|e| parse_err("scenario.preset", e))?,
        };
        let mut merged = serde_json::to_value(preset.scenario()).expect("scenario serializes");
        overlay(&mut merged, Value::Object(section));
        let scenario: ScenarioConfig =
            serde_path_to_error::deserialize(merged).map_err(|e| parse_err("scenario", e))?;

        let cfg = RunConfig {
            name: raw.name,
            preset,
            scenario,
            train: raw.train,
            model: ModelConfig {
                sgnn: raw.sgnn,
                mixer: raw.mixer,
                nets: raw.nets,
                graph: raw.graph,
            },
            seeds: raw.seeds,
            out_dir: raw.out_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| invalid("train", e))?;
        self.scenario.validate().map_err(|e| invalid("scenario", e))?;
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid {
                field: "seeds".into(),
                reason: "at least one seed is required".into(),
            });
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ConfigError::Invalid {
                field: "name".into(),
                reason: "must be a non-empty file name".into(),
            });
        }
        Model::new(&self.model, &self.scenario, 0).map_err(|e| invalid("model", e))?;
        Ok(())
    }

    /// Resolved config as JSON; parsing it back yields an identical config.
    pub fn to_json(&self) -> Value {
        let mut scenario = serde_json::to_value(&self.scenario).expect("scenario serializes");
        scenario
            .as_object_mut()
            .expect("scenario is an object")
            .insert("preset".into(), serde_json::to_value(self.preset).expect("preset serializes"));
        serde_json::to_value(Snapshot {
            name: &self.name,
            scenario,
            train: &self.train,
            sgnn: &self.model.sgnn,
            mixer: &self.model.mixer,
            nets: &self.model.nets,
            graph: &self.model.graph,
            seeds: &self.seeds,
            out_dir: &self.out_dir,
        })
        .expect("config serializes")
    }
}
