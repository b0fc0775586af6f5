//! Layering of an optional JSON config file under command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Raised when the config file or the merged settings are unusable; mapped
/// to the validation exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::error::Error for ConfigError {}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Returns `flags` with every unset field filled from the JSON object in
/// `file`. Keys use the flag names in snake case; unknown keys are rejected.
pub fn resolve<T>(flags: &T, file: Option<&Path>) -> anyhow::Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut merged = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("config {} is not valid JSON: {e}", path.display())))?;
            match value {
                Value::Object(map) => map,
                _ => return Err(ConfigError(format!("config {} must be a JSON object", path.display())).into()),
            }
        }
        None => serde_json::Map::new(),
    };
    let Value::Object(cli) = serde_json::to_value(flags)? else {
        unreachable!("flag structs serialize to objects")
    };
    for (k, v) in cli {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| ConfigError(format!("invalid configuration: {e}")).into())
}

/// Unwraps a setting that must be present after merging.
pub fn required<T: Clone>(value: &Option<T>, name: &str) -> Result<T, ConfigError> {
    value
        .clone()
        .ok_or_else(|| ConfigError(format!("missing required setting --{}", name.replace('_', "-"))))
}
