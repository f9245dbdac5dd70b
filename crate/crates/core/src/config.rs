//! Flat `key=value` text records used by run configs and checkpoint headers.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Keys are unique. List values are comma separated.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected key=value, got `{line}`")))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(k, "duplicate key"));
        }
    }
    Ok(out)
}

pub fn write_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Typed access to a parsed record that tracks which keys were consumed.
pub struct KvReader {
    map: BTreeMap<String, String>,
}

impl KvReader {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        KvReader { map }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self::new(parse_kv(text)?))
    }

    fn convert<V: FromStr>(key: &str, raw: &str) -> Result<V>
    where
        V::Err: Display,
    {
        raw.parse().map_err(|e: V::Err| Error::config(key, format!("`{raw}`: {e}")))
    }

    /// Removes and parses `key`, or returns `default` when it is absent.
    pub fn get<V: FromStr>(&mut self, key: &str, default: V) -> Result<V>
    where
        V::Err: Display,
    {
        match self.map.remove(key) {
            Some(raw) => Self::convert(key, &raw),
            None => Ok(default),
        }
    }

    pub fn get_list<V: FromStr>(&mut self, key: &str, default: Vec<V>) -> Result<Vec<V>>
    where
        V::Err: Display,
    {
        match self.map.remove(key) {
            Some(raw) => raw.split(',').map(|p| Self::convert(key, p.trim())).collect(),
            None => Ok(default),
        }
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    /// Keys not consumed so far, leaving the reader empty.
    pub fn into_rest(self) -> BTreeMap<String, String> {
        self.map
    }

    /// Fails on any key that was never consumed.
    pub fn finish(self) -> Result<()> {
        match self.map.into_keys().next() {
            Some(k) => Err(Error::config(k, "unknown key")),
            None => Ok(()),
        }
    }
}

pub fn join<V: Display>(vals: &[V]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
