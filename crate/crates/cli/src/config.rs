//! Config loading: JSON file → dotted-path overrides → typed struct.
//!
//! Overrides look like `train.learning_rate=1e-3` or `learning_rate=1e-3`;
//! a leading segment equal to the subcommand name is stripped. Values parse
//! as JSON first, falling back to a plain string. Unknown keys are rejected
//! by the typed deserialization.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub fn load_config<T>(path: Option<&Path>, overrides: &[String], prefix: &str) -> Result<T>
where
    T: DeserializeOwned + Serialize + Default,
{
    let mut value: Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => serde_json::to_value(T::default())?,
    };
    for entry in overrides {
        apply_override(&mut value, entry, prefix)?;
    }
    let typed: T = serde_json::from_value(value.clone()).map_err(|e| {
        anyhow::anyhow!("config schema error: {e} (resolved config was {value})")
    })?;
    Ok(typed)
}

fn apply_override(root: &mut Value, entry: &str, prefix: &str) -> Result<()> {
    let Some((path, raw)) = entry.split_once('=') else {
        bail!("override '{entry}' must look like key.path=value");
    };
    let mut segments: Vec<&str> = path.split('.').collect();
    if segments.len() > 1 && segments[0] == prefix {
        segments.remove(0);
    }
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        bail!("override '{entry}' has an empty key path");
    }
    let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cursor = root;
    for (i, seg) in segments.iter().enumerate() {
        if i + 1 == segments.len() {
            match cursor {
                Value::Object(map) => {
                    map.insert((*seg).to_string(), parsed);
                }
                other => bail!("cannot set '{path}': {seg} lands inside non-object {other}"),
            }
            return Ok(());
        }
        cursor = match cursor {
            Value::Object(map) => map
                .entry((*seg).to_string())
                .or_insert_with(|| Value::Object(serde_json::Map::new())),
            other => bail!("cannot descend into '{seg}' of non-object {other}"),
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, Default, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        lr: f64,
        nested: Nested,
        name: String,
    }

    #[derive(Debug, Serialize, Deserialize, Default, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Nested {
        k: usize,
    }

    #[test]
    fn overrides_apply_with_and_without_prefix() {
        let d: Demo = load_config(
            None,
            &[
                "train.lr=0.5".to_string(),
                "nested.k=7".to_string(),
                "name=hello".to_string(),
            ],
            "train",
        )
        .unwrap();
        assert_eq!(d.lr, 0.5);
        assert_eq!(d.nested.k, 7);
        assert_eq!(d.name, "hello");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = load_config::<Demo>(None, &["bogus=1".to_string()], "train").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }
}
