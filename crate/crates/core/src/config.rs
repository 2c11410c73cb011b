//! Plain `key = value` configuration files and typed overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value pairs parsed from a config file and command-line overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            kv.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    /// Parses a `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applies every entry whose key starts with `prefix.` to `target`.
    /// Returns the keys that were consumed.
    pub fn apply_section(&self, prefix: &str, target: &mut dyn Settings) -> Result<Vec<String>> {
        let mut used = Vec::new();
        let dotted = format!("{prefix}.");
        for (k, v) in &self.entries {
            if let Some(field) = k.strip_prefix(&dotted) {
                target.set(field, v)?;
                used.push(k.clone());
            }
        }
        Ok(used)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// A configuration struct that accepts string overrides and reports its resolved state.
pub trait Settings {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn entries(&self) -> Vec<(String, String)>;

    fn write_section(&self, prefix: &str, kv: &mut KeyValues) {
        for (k, v) in self.entries() {
            kv.set(&format!("{prefix}.{k}"), v);
        }
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("`{key}`: expected a boolean, got `{other}`"))),
    }
}

/// Comma-separated list of numbers.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn fmt_list<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs {N} comma-separated numbers")))
}

pub fn unknown_key(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown {section} setting `{key}`"))
}
