//! Flat JSON configuration with dotted keys.
//!
//! A config file is a single JSON object such as
//! `{"optim.lr": 0.003, "pff.tokens": 16}`. Keys name leaves of
//! [`TrainConfig`]; anything else is rejected with the key named. Overrides
//! (`key=value`) are applied after the file, and defaults fill the rest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::harness::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: {message}")]
    Value { key: String, message: String },
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every leaf of `value` keyed by its dotted path.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            if parts.peek().is_none() {
                node.insert(p.to_string(), v.clone());
            } else {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

/// Parses an override value: JSON if it parses, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()))
}

/// Layers `file` entries and then `overrides` over `defaults`.
pub fn layer<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Value>, overrides: &[String]) -> Result<T> {
    let mut flat = flatten(&serde_json::to_value(defaults).expect("defaults serialise"));
    let mut set = |key: &str, v: Value| -> Result<()> {
        match flat.get_mut(key) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    };
    if let Some(file) = file {
        let obj = file.as_object().ok_or_else(|| ConfigError::Invalid("config file must hold a JSON object".into()))?;
        for (k, v) in obj {
            if v.is_object() {
                return Err(ConfigError::Value {
                    key: k.clone(),
                    message: "nested objects are not allowed; use dotted keys".into(),
                });
            }
            set(k, v.clone())?;
        }
    }
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
        set(k.trim(), parse_value(v))?;
    }
    serde_json::from_value(unflatten(&flat)).map_err(|e| ConfigError::Invalid(e.to_string()))
}

/// Training configuration: defaults, then `file` entries, then `overrides`.
pub fn resolve(file: Option<&Value>, overrides: &[String]) -> Result<TrainConfig> {
    let cfg: TrainConfig = layer(&TrainConfig::default(), file, overrides)?;
    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

pub fn read_file(path: &Path) -> Result<Value> {
    let err = |message: String| ConfigError::File {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let file = path.map(read_file).transpose()?;
    resolve(file.as_ref(), overrides)
}

/// The defaults as a flat JSON object, e.g. for `--print-config`.
pub fn flat_defaults() -> Value {
    let v = serde_json::to_value(TrainConfig::default()).expect("defaults serialise");
    Value::Object(flatten(&v).into_iter().collect())
}
