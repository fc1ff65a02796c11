//! Flat `key = value` settings with layered overrides.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, command
//! line flags. A config file is either `key = value` lines (`#` starts a
//! comment) or a JSON document; for JSON, a top-level `config` object is used
//! when present, so the output of a previous run can be fed back in.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use magic_iv::Error;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_defaults(defaults: &[(&str, &str)]) -> Self {
        Self {
            values: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Overlays a file; unknown keys are rejected.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for (k, v) in parse(&text)? {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: String) -> Result<(), Error> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<(), Error> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Error> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{raw}`")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, Error> {
        match self.raw(key) {
            "" | "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    /// The effective settings, minus keys that do not affect results.
    pub fn echo(&self, skip: &[&str]) -> BTreeMap<String, String> {
        self.values
            .iter()
            .filter(|(k, _)| !skip.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

fn parse(text: &str) -> Result<Vec<(String, String)>, Error> {
    if text.trim_start().starts_with('{') {
        return parse_json(text);
    }
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_json(text: &str) -> Result<Vec<(String, String)>, Error> {
    let doc: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
    let obj = doc.get("config").unwrap_or(&doc);
    let map = obj
        .as_object()
        .ok_or_else(|| Error::Config("config JSON must be an object".into()))?;
    Ok(map
        .iter()
        .map(|(k, v)| {
            let v = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            (k.clone(), v)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_lines() {
        let kv = parse("# study\nreps = 10\n\nseed=3 # trailing\n").unwrap();
        assert_eq!(kv, vec![("reps".into(), "10".into()), ("seed".into(), "3".into())]);
        assert!(parse("reps 10").is_err());
    }

    #[test]
    fn json_uses_config_object() {
        let kv = parse(r#"{"schema_version": 1, "config": {"reps": "10", "seed": 3}}"#).unwrap();
        assert_eq!(kv, vec![("reps".into(), "10".into()), ("seed".into(), "3".into())]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut s = Settings::from_defaults(&[("reps", "100")]);
        assert!(s.set("repz", "1".into()).is_err());
        s.set("reps", "5".into()).unwrap();
        assert_eq!(s.get::<usize>("reps").unwrap(), 5);
        assert!(s.get::<f64>("missing").is_err());
    }
}
