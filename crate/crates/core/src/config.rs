//! Flat `key = value` configuration text.
//!
//! Canonical form is one `key = value` per line, keys sorted, floats written
//! with Rust's shortest round-trip formatting so that text → value → text is
//! exact. A JSON object of scalars (or arrays of scalars) is accepted as an
//! alternative input.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            return Self::parse_json(text);
        }
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(Error::Config(format!("line {line_no}: duplicate key `{key}`")));
            }
        }
        Ok(KvMap { entries })
    }

    fn parse_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("line {}: invalid JSON: {e}", e.line()))
        })?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("JSON config must be an object".into()))?;
        let mut entries = BTreeMap::new();
        for (key, v) in obj {
            let text = match v {
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(json_scalar)
                    .collect::<Result<Vec<_>>>()?
                    .join(","),
                other => json_scalar(other)?,
            };
            entries.insert(key.clone(), (text, 0));
        }
        Ok(KvMap { entries })
    }

    pub fn from_pairs<K: Into<String>>(pairs: impl IntoIterator<Item = (K, String)>) -> Self {
        KvMap {
            entries: pairs
                .into_iter()
                .map(|(k, v)| (k.into(), (v, 0)))
                .collect(),
        }
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((text, line)) => text.parse::<T>().map(Some).map_err(|e| {
                Error::Config(format!("{}`{key}` = `{text}`: {e}", line_prefix(line)))
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Removes and parses a comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((text, line)) => text
                .split(',')
                .map(|item| {
                    item.trim().parse::<T>().map_err(|e| {
                        Error::Config(format!("{}`{key}` = `{text}`: {e}", line_prefix(line)))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Fails if any key was left unconsumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::Config(format!(
                "{}unknown key `{key}`",
                line_prefix(*line)
            ))),
        }
    }

    pub fn to_canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, (v, _)) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

fn line_prefix(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!("line {line}: ")
    }
}

fn json_scalar(v: &serde_json::Value) -> Result<String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        serde_json::Value::Bool(b) => Ok(b.to_string()),
        other => Err(Error::Config(format!("unsupported JSON value {other}"))),
    }
}

/// Shortest round-trip text for a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
