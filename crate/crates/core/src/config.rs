//! Config resolution. Later sources win: built-in defaults, a named
//! preset, a JSON file, `STRIDE_*` environment variables, then flags.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::scheduler::{preset, ScheduleConfig};

pub const ENV_PREFIX: &str = "STRIDE_";
/// Separates nested keys in an environment variable name.
pub const ENV_NESTING: &str = "__";
pub const DEFAULT_PRESET: &str = "stride";

#[derive(Debug, Clone, Default)]
pub struct ConfigSources<'a> {
    pub preset: Option<&'a str>,
    pub file: Option<&'a Path>,
    /// Raw `(name, value)` pairs; names without the prefix are ignored.
    pub env: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub cycles: Option<u64>,
}

pub fn resolve(src: &ConfigSources<'_>) -> Result<ScheduleConfig> {
    let base = preset(src.preset.unwrap_or(DEFAULT_PRESET))?;
    let mut value = serde_json::to_value(&base).expect("config serializes");
    if let Some(path) = src.file {
        merge(&mut value, &read_config_file(path)?);
    }
    apply_env(&mut value, &src.env)?;
    if let Some(seed) = src.seed {
        value["seed"] = seed.into();
    }
    if let Some(cycles) = src.cycles {
        value["total_cycles"] = cycles.into();
    }
    let cfg: ScheduleConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::ConfigNotFound(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if !v.is_object() {
        return Err(Error::config(format!("{} must hold a JSON object", path.display())));
    }
    Ok(v)
}

/// Recursive object merge; anything that is not an object on both sides
/// is replaced.
pub fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Applies `STRIDE_A__B=value` as `{"a": {"b": value}}`. Key segments match
/// existing keys case-insensitively; values parse as JSON and fall back to
/// plain strings.
pub fn apply_env(value: &mut Value, vars: &[(String, String)]) -> Result<()> {
    let mut vars: Vec<&(String, String)> = vars.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let path = &name[ENV_PREFIX.len()..];
        let mut slot = &mut *value;
        for seg in path.split(ENV_NESTING) {
            let Value::Object(map) = slot else {
                return Err(Error::config(format!("{name}: {seg} is not inside an object")));
            };
            let Some(key) = map.keys().find(|k| k.eq_ignore_ascii_case(seg)).cloned() else {
                return Err(Error::config(format!("{name} does not name a config key")));
            };
            slot = map.get_mut(&key).expect("key just found");
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
    }
    Ok(())
}
