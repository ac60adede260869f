//! Run configuration: a TOML file layered over built-in defaults, then
//! `key.path=value` overrides from the command line.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

/// A fully resolved configuration and its identity.
#[derive(Debug, Clone)]
pub struct Resolved<T> {
    pub config: T,
    /// The resolved configuration as TOML, logged with every run.
    pub toml: String,
    /// SHA-256 over the command name and the canonical JSON of the config.
    pub hash: String,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, path: &str, value: Value) -> CliResult<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Validation(format!("empty key in override {path:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Validation(format!("{p} in {path:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Every `seed` key anywhere in the config takes the run's global seed.
fn stamp_seed(table: &mut Table, seed: u64) {
    for (k, v) in table.iter_mut() {
        match v {
            Value::Table(t) => stamp_seed(t, seed),
            _ if k == "seed" => *v = Value::Integer(seed as i64),
            _ => {}
        }
    }
}

pub fn resolve<T>(command: &str, seed: u64, file: Option<&Path>, overrides: &[String]) -> CliResult<Resolved<T>>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut table = Table::try_from(T::default()).map_err(|e| CliError::Runtime(format!("default config: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let over: Table = toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        merge(&mut table, over);
    }
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| CliError::Validation(format!("override {o:?} is not key=value")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    stamp_seed(&mut table, seed);
    let config: T = table.try_into().map_err(|e| CliError::Validation(format!("config: {e}")))?;
    let toml = toml::to_string(&config).map_err(|e| CliError::Runtime(e.to_string()))?;
    let json = serde_json::to_string(&config).map_err(|e| CliError::Runtime(e.to_string()))?;
    let hash = hex::encode(Sha256::digest(format!("{command}\n{json}")));
    Ok(Resolved { config, toml, hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        x: f64,
        name: String,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Outer {
        n: usize,
        inner: Inner,
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "n = 3\n[inner]\nx = 1.5\n").unwrap();
        let r: Resolved<Outer> = resolve("cmd", 0, Some(&path), &["inner.name=abc".into(), "n=4".into()]).unwrap();
        assert_eq!(r.config, Outer { n: 4, inner: Inner { x: 1.5, name: "abc".into() } });
        let again: Resolved<Outer> = resolve("cmd", 0, Some(&path), &["inner.name=abc".into(), "n=4".into()]).unwrap();
        assert_eq!(r.hash, again.hash);
        let other: Resolved<Outer> = resolve("other", 0, Some(&path), &["inner.name=abc".into(), "n=4".into()]).unwrap();
        assert_ne!(r.hash, other.hash);
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Seeded {
        seed: u64,
        inner: Inner2,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Inner2 {
        seed: u64,
    }

    #[test]
    fn global_seed_reaches_nested_configs_and_the_hash() {
        let a: Resolved<Seeded> = resolve("c", 5, None, &["inner.seed=9".into()]).unwrap();
        assert_eq!(a.config, Seeded { seed: 5, inner: Inner2 { seed: 5 } });
        let b: Resolved<Seeded> = resolve("c", 6, None, &[]).unwrap();
        assert_ne!(a.hash, b.hash);
    }

    #[test]
    fn unknown_keys_and_bad_types_are_validation_errors() {
        let unknown = resolve::<Outer>("c", 0, None, &["inner.y=1".into()]);
        assert!(matches!(unknown, Err(CliError::Validation(_))));
        let bad = resolve::<Outer>("c", 0, None, &["n=oops".into()]);
        assert!(matches!(bad, Err(CliError::Validation(_))));
        let malformed = resolve::<Outer>("c", 0, None, &["n".into()]);
        assert!(matches!(malformed, Err(CliError::Validation(_))));
    }
}
