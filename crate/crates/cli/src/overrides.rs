//! Dotted-key overrides (`train.epochs=5`) applied to a config through its
//! TOML tree, so unknown keys fail exactly as they would in a file.

use dfcil_core::{Error, Result};

use crate::config::ExperimentConfig;

/// Splits `key=value`, parsing the value as a TOML literal and falling back
/// to a bare string.
pub fn parse_assignment(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override '{s}' has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut table = root;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    // Integers given where the field is a float still deserialize as floats.
    let value = match (table.get(last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert(last.to_string(), value);
    Ok(())
}

/// Applies every override in order; later ones win.
pub fn apply(cfg: &ExperimentConfig, assignments: &[(String, toml::Value)]) -> Result<ExperimentConfig> {
    if assignments.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root = toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in assignments {
        set_path(&mut root, k, v.clone())?;
    }
    root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}
