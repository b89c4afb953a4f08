//! Flat `key=value` text used for run configs and checkpoint sidecars.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key/value pairs. Keys are consumed as they are read so that leftovers can be
/// reported as unknown.
#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {} is not key=value", i + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(k, "given more than once"));
            }
        }
        Ok(KvMap { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes and parses `key`, falling back to `default` when absent.
    pub fn take_or<V>(&mut self, key: &str, default: V) -> Result<V>
    where
        V: FromStr,
        V::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(raw) => raw.parse::<V>().map_err(|e| Error::config(key, e.to_string())),
        }
    }

    pub fn take<V>(&mut self, key: &str) -> Result<Option<V>>
    where
        V: FromStr,
        V::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<V>().map(Some).map_err(|e| Error::config(key, e.to_string())),
        }
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            Some(k) => Err(Error::config(k, "unknown key")),
            None => Ok(()),
        }
    }
}

/// Renders `(key, value)` pairs one per line in the given order.
pub fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_unknown() {
        let mut kv = KvMap::parse("a = 3\n# comment\nb=x # trailing\n\nzzz=1").unwrap();
        assert_eq!(kv.take_or("a", 0usize).unwrap(), 3);
        assert_eq!(kv.take::<String>("b").unwrap().as_deref(), Some("x"));
        assert_eq!(kv.take_or("missing", 7u32).unwrap(), 7);
        match kv.finish() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "zzz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values_and_lines() {
        let mut kv = KvMap::parse("a=abc").unwrap();
        assert!(matches!(kv.take_or("a", 0usize), Err(Error::Config { .. })));
        assert!(KvMap::parse("nonsense").is_err());
        assert!(KvMap::parse("a=1\na=2").is_err());
    }
}
