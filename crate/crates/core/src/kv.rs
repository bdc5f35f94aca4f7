//! Line-oriented `key = value` files used for manifests and run configs.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `key = value` pairs. Blank lines and `#` comments are ignored on
/// parse; duplicate keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut kv = KeyValues::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", lineno + 1))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(format!("line {}: empty key", lineno + 1));
            }
            let key = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if kv.get(&key).is_some() {
                return Err(format!("line {}: duplicate key `{key}`", lineno + 1));
            }
            kv.entries.push((key, unquote(value.trim()).to_string()));
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|d| Error::corrupt(path, d))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn require(&self, key: &str) -> std::result::Result<&str, String> {
        self.get(key).ok_or_else(|| format!("missing key `{key}`"))
    }

    pub fn parse_value<V: FromStr>(&self, key: &str) -> std::result::Result<V, String> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| format!("bad value `{raw}` for `{key}`"))
    }

    pub fn parse_list<V: FromStr>(&self, key: &str) -> std::result::Result<Vec<V>, String> {
        parse_list(self.require(key)?).ok_or_else(|| format!("bad list for `{key}`"))
    }
}

pub fn parse_list<V: FromStr>(raw: &str) -> Option<Vec<V>> {
    if raw.trim().is_empty() {
        return Some(Vec::new());
    }
    raw.split(',').map(|p| p.trim().parse().ok()).collect()
}

pub fn join_list<V: ToString>(values: &[V]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|v| v.strip_suffix('"'))
        .unwrap_or(v)
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_sections() {
        let kv = KeyValues::parse("# c\na = 1\n[train]\nlr = \"0.01\" # x\n\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("train.lr"), Some("0.01"));
        let again = KeyValues::parse(&kv.render()).unwrap();
        assert_eq!(again, kv);
    }

    #[test]
    fn rejects_garbage() {
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse(" = 2").is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("1, 2,3"), Some(vec![1, 2, 3]));
        assert_eq!(parse_list::<usize>(""), Some(vec![]));
        assert_eq!(parse_list::<usize>("1,x"), None);
        assert_eq!(join_list(&[1, 2]), "1,2");
    }
}
