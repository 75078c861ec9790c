//! Flat `key=value` text blocks, used for config files, checkpoint headers
//! and run manifests.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key=value` lines. Blank lines and `#` comments are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            map.insert(k.trim(), v.trim())?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, key: &str, value: &str) -> Result<()> {
        if self.entries.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("key {key} given twice")));
        }
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes `key` and parses it, falling back to `default` when absent.
    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::Config(format!("{key}={raw}: {e}"))),
        }
    }

    pub fn take_required<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self
            .entries
            .remove(key)
            .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
        raw.parse()
            .map_err(|e| Error::Config(format!("{key}={raw}: {e}")))
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Fails if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<_> = self.entries.keys().cloned().collect();
            Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
        }
    }

    pub fn merge(&mut self, other: KvMap) {
        self.entries.extend(other.entries);
    }
}

pub fn join<T: Display>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn split<T>(raw: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad list entry {s:?}: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut kv = KvMap::parse("# comment\nepochs = 3\n\nlr=0.5\ntypo=1\n").unwrap();
        assert_eq!(kv.take_or("epochs", 1usize).unwrap(), 3);
        assert_eq!(kv.take_or("lr", 0.1f64).unwrap(), 0.5);
        assert_eq!(kv.take_or("missing", 7u32).unwrap(), 7);
        assert!(kv.finish().is_err());
    }

    #[test]
    fn malformed_lines() {
        assert!(KvMap::parse("novalue").is_err());
        assert!(KvMap::parse("a=1\na=2").is_err());
        let mut kv = KvMap::parse("n=abc").unwrap();
        assert!(kv.take_or("n", 0usize).is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(split::<usize>("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(join(&[0.5, 1.0]), "0.5,1");
        assert!(split::<usize>("").unwrap().is_empty());
    }
}
