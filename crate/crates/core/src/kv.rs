//! Flat `key=value` text: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value pairs with use tracking, so leftovers can be rejected.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes and parses `key`, if present.
    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn take_or<V: FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Fails if any key was never taken.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(_) => Err(Error::Config(format!(
                "unknown keys: {}",
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Splits into the pairs whose keys appear in `keys` and the rest.
    pub fn split_off(&mut self, keys: &[&str]) -> KeyValues {
        let mut out = KeyValues::default();
        for k in keys {
            if let Some(v) = self.entries.remove(*k) {
                out.entries.insert(k.to_string(), v);
            }
        }
        out
    }
}

impl std::fmt::Display for KeyValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_tracks_unknown_keys() {
        let mut kv = KeyValues::parse("# comment\nfeatures = 8\n\nseed=3 # trailing\nbogus=1\n").unwrap();
        assert_eq!(kv.take::<usize>("features").unwrap(), Some(8));
        assert_eq!(kv.take_or::<u64>("seed", 0).unwrap(), 3);
        assert_eq!(kv.take_or::<u64>("absent", 7).unwrap(), 7);
        assert!(kv.finish().unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValues::parse("just words").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        let mut kv = KeyValues::parse("n=x").unwrap();
        assert!(kv.take::<usize>("n").is_err());
    }
}
