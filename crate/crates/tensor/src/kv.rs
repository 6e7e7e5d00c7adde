//! Flat key-value text grammar shared by checkpoint and dataset manifests.
//!
//! One entry per line, `key = value`. Keys are non-empty and use only ASCII
//! alphanumerics and `._-`. The value is the rest of the line with
//! surrounding whitespace trimmed. Blank lines and lines starting with `#`
//! are ignored. Entry order is preserved and duplicate keys are rejected.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, TensorError};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append an entry, or replace the value of an existing key. Panics on an
    /// invalid key, which is a programming error on the writer side.
    pub fn set(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        let key = key.into();
        assert!(valid_key(&key), "invalid manifest key {key:?}");
        let value = value.to_string();
        assert!(!value.contains('\n'), "manifest value for {key} spans lines");
        match self.index.get(&key) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(key.clone(), self.entries.len());
                self.entries.push((key, value));
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.index.get(key).map(|&i| self.entries[i].1.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| TensorError::Format(format!("missing key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| TensorError::Format(format!("bad value for `{key}`: {raw:?}")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse(key),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Entries whose key starts with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries().filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl FromStr for KvFile {
    type Err = TensorError;

    fn from_str(text: &str) -> Result<Self> {
        let mut kv = KvFile::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(TensorError::Format(format!("line {}: missing `=`", lineno + 1)));
            };
            let k = k.trim();
            if !valid_key(k) {
                return Err(TensorError::Format(format!("line {}: invalid key {k:?}", lineno + 1)));
            }
            if kv.index.contains_key(k) {
                return Err(TensorError::Format(format!("line {}: duplicate key {k}", lineno + 1)));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }
}

impl fmt::Display for KvFile {
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
    fn parses_comments_and_preserves_order() {
        let kv: KvFile = "# header\nb = 2\n\na = hello world \n".parse().unwrap();
        let keys: Vec<_> = kv.entries().map(|(k, _)| k).collect();
        assert_eq!(keys, ["b", "a"]);
        assert_eq!(kv.get("a"), Some("hello world"));
        assert_eq!(kv.parse::<u32>("b").unwrap(), 2);
        assert_eq!(kv.to_string().parse::<KvFile>().unwrap(), kv);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!("a = 1\na = 2".parse::<KvFile>().is_err());
        assert!("no equals sign".parse::<KvFile>().is_err());
        assert!("bad key! = 1".parse::<KvFile>().is_err());
    }
}
