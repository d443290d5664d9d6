//! Flat `key = value` configuration files.
//!
//! Keys are dotted (`backend.seed`). A `[section]` header prefixes every
//! following key with `section.`, so both of these are equivalent:
//!
//! ```text
//! backend.kind = toy
//!
//! [backend]
//! kind = "toy"
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Values may be quoted.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    line: line_no,
                    message: format!("unterminated section header `{line}`"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config {
                    line: line_no,
                    message: "empty key".into(),
                });
            }
            let full_key = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            let value = strip_comment(value.trim());
            entries.insert(full_key, unquote(value).to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Parses `key` as `T`, falling back to `default` when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| Error::invalid(key, format!("cannot parse `{raw}`"))),
        }
    }

    /// All entries whose key starts with `prefix.`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, String> {
        let dotted = format!("{prefix}.");
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn strip_comment(value: &str) -> &str {
    if value.starts_with('"') || value.starts_with('\'') {
        return value;
    }
    match value.find(" #") {
        Some(pos) => value[..pos].trim_end(),
        None => value,
    }
}

fn unquote(value: &str) -> &str {
    for q in ['"', '\''] {
        if value.len() >= 2 && value.starts_with(q) && value.ends_with(q) {
            return &value[1..value.len() - 1];
        }
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_and_sectioned_keys() {
        let cfg = ConfigFile::parse(
            "# comment\nbackend.kind = toy\n\n[backend]\nseed = 7 # inline\ntext_dim = \"16\"\n[render]\nelevation = 15.5\n",
        )
        .unwrap();
        assert_eq!(cfg.get("backend.kind"), Some("toy"));
        assert_eq!(cfg.get_or("backend.seed", 0u64).unwrap(), 7);
        assert_eq!(cfg.get_or("backend.text_dim", 0usize).unwrap(), 16);
        assert_eq!(cfg.get_or("render.elevation", 0.0f64).unwrap(), 15.5);
        assert_eq!(cfg.get_or("render.size", 224usize).unwrap(), 224);
        assert_eq!(cfg.with_prefix("render").len(), 1);
    }

    #[test]
    fn reports_line_of_malformed_entry() {
        let err = ConfigFile::parse("a = 1\nnot a pair\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
    }

    #[test]
    fn bad_value_names_key() {
        let cfg = ConfigFile::parse("backend.seed = seven").unwrap();
        let err = cfg.get_or("backend.seed", 0u64).unwrap_err();
        assert!(err.to_string().contains("backend.seed"));
    }
}
