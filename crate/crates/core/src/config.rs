//! Line-based `key = value` configuration with `#` comments.
//!
//! Keys address fields of any serde-serializable config by dotted path
//! (`reg.steps_per_level = 100`). Values are parsed as JSON scalars when
//! possible and as strings otherwise; list fields take comma-separated items.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Parse `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn scalar(text: &str) -> Value {
    serde_json::from_str::<Value>(text)
        .ok()
        .filter(|v| !v.is_array() && !v.is_object())
        .unwrap_or_else(|| Value::String(text.to_string()))
}

fn set_path(root: &mut Value, key: &str, text: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        if i + 1 < parts.len() {
            node = slot;
            continue;
        }
        *slot = match slot {
            Value::Array(_) => Value::Array(
                text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(scalar).collect(),
            ),
            // Optional fields serialize as null and take any scalar.
            Value::String(_) => Value::String(text.to_string()),
            _ => scalar(text),
        };
        return Ok(());
    }
    Err(Error::Config(format!("unknown key {key:?}")))
}

/// Apply `pairs` on top of `base`, later pairs winning.
pub fn apply_pairs<T>(base: &T, pairs: &[(String, String)]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut v = serde_json::to_value(base)?;
    for (k, text) in pairs {
        set_path(&mut v, k, text)?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Keep only the pairs under `prefix.` with the prefix removed.
pub fn section(pairs: &[(String, String)], prefix: &str) -> Vec<(String, String)> {
    let p = format!("{prefix}.");
    pairs.iter().filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone()))).collect()
}
