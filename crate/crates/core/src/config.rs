//! Loading JSON configs and applying `path=value` overrides.
//!
//! Overrides are applied to the fully defaulted form of a config, so any
//! field the schema knows can be overridden even when the file omits it, and
//! a path the schema does not know is an error.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))
}

/// Splits `key=value`.
pub fn parse_override(spec: &str) -> Result<(String, String)> {
    match spec.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::config(format!("override '{spec}' is not of the form key=value"))),
    }
}

/// Value text is read as JSON when it parses as JSON, else as a string, so
/// `eta=0.1` sets a number and `method=clion` sets a string.
fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Replaces the value at a dotted path. Every segment must already exist.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let unknown = || Error::config(format!("unknown config path '{path}'"));
    let mut node = root;
    for seg in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(seg).ok_or_else(unknown)?,
            Value::Array(items) => {
                let i: usize = seg.parse().map_err(|_| unknown())?;
                items.get_mut(i).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
    }
    *node = value;
    Ok(())
}

pub fn apply_values<T: Serialize + DeserializeOwned>(cfg: &T, assignments: &[(String, Value)]) -> Result<T> {
    if assignments.is_empty() {
        return Ok(serde_json::from_value(serde_json::to_value(cfg)?)?);
    }
    let mut root = serde_json::to_value(cfg)?;
    for (path, value) in assignments {
        set_path(&mut root, path, value.clone())?;
    }
    serde_json::from_value(root).map_err(|e| Error::config(format!("override produced an invalid config: {e}")))
}

pub fn apply_overrides<T: Serialize + DeserializeOwned>(cfg: &T, overrides: &[(String, String)]) -> Result<T> {
    let values: Vec<(String, Value)> = overrides.iter().map(|(k, v)| (k.clone(), parse_value(v))).collect();
    apply_values(cfg, &values)
}
