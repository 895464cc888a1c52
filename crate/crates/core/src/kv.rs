//! Line-oriented `key = value` text used for configs, noise specs and
//! metric reports. Blank lines and lines starting with `#` are ignored.

use std::fmt::{self, Display};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{bail, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvText {
    entries: IndexMap<String, String>,
}

impl KvText {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvText::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key = value, got {line:?}", n + 1);
            };
            let k = k.trim();
            if k.is_empty() {
                bail!(Config, "line {}: empty key", n + 1);
            }
            if kv.entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                bail!(Config, "line {}: duplicate key {k}", n + 1);
            }
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Comma-separated list value.
    pub fn set_list<V: Display>(&mut self, key: &str, values: &[V]) {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.set(key, joined.join(","));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.raw(key).map(|s| parse_value(key, s)).transpose()
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    pub fn get_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        let Some(s) = self.raw(key) else { return Ok(None) };
        if s.is_empty() {
            return Ok(Some(Vec::new()));
        }
        s.split(',').map(|p| parse_value(key, p.trim())).collect::<Result<_>>().map(Some)
    }

    /// Fails on any key outside `known`, catching typos in config files.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => bail!(Config, "unknown key {k}"),
            None => Ok(()),
        }
    }
}

fn parse_value<V: FromStr>(key: &str, s: &str) -> Result<V> {
    s.parse().map_err(|_| Error::Config(format!("invalid value {s:?} for {key}")))
}

impl Display for KvText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_order() {
        let mut kv = KvText::new();
        kv.set("b", 2);
        kv.set("a", 1.5);
        kv.set_list("w", &[4, 8]);
        let back = KvText::parse(&kv.to_string()).unwrap();
        assert_eq!(back, kv);
        assert_eq!(back.keys().collect::<Vec<_>>(), ["b", "a", "w"]);
        assert_eq!(back.get_list::<usize>("w").unwrap(), Some(vec![4, 8]));
    }

    #[test]
    fn comments_blanks_and_errors() {
        let kv = KvText::parse("# c\n\n x = 3 \n").unwrap();
        assert_eq!(kv.require::<u32>("x").unwrap(), 3);
        assert!(kv.require::<u32>("y").is_err());
        assert!(kv.get::<u32>("x").is_ok());
        assert!(KvText::parse("x 3").is_err());
        assert!(KvText::parse("x=1\nx=2").is_err());
        assert!(KvText::parse("x=abc").unwrap().get::<f64>("x").is_err());
        assert!(kv.reject_unknown(&["y"]).is_err());
        assert_eq!(KvText::parse("l =").unwrap().get_list::<u8>("l").unwrap(), Some(vec![]));
    }
}
