//! Flat `key = value` text records with `#` comments. Used for run
//! configuration files and for the human-readable spec/config blocks
//! embedded in dataset and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed record. Keys keep the order they appeared in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvRecord {
    entries: Vec<(String, String)>,
}

impl KvRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rec = KvRecord::new();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got `{raw}`", lineno + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if seen.insert(k.to_string(), lineno + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
            rec.entries.push((k.to_string(), v.to_string()));
        }
        Ok(rec)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let v = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = v,
            None => self.entries.push((key.to_string(), v)),
        }
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        let i = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(i).1)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parse `key` if present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.parse_opt(key)?
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    /// Overwrite `*slot` if `key` is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.parse_opt(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fail on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Comma-separated list value.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{s}`: {e}")))
        })
        .collect()
}

pub fn format_list<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
