//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment, blank lines ignored. Keys are `[A-Za-z0-9_.-]+`; values are the
//! trimmed remainder of the line. Duplicate keys are an error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(err(format!("invalid key `{k}`")));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
        }
        Ok(RunConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        debug_assert!(valid_key(key), "invalid key {key}");
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Typed lookup with a default for absent keys.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{key} = {v}`"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Overlays `other` on top of `self`.
    pub fn merged_with(&self, other: &RunConfig) -> RunConfig {
        let mut entries = self.entries.clone();
        for (k, v) in &other.entries {
            entries.insert(k.clone(), v.clone());
        }
        RunConfig { entries }
    }
}

impl fmt::Display for RunConfig {
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
    fn parses_comments_and_blank_lines() {
        let c = RunConfig::parse("# header\n\nseed = 7\nmodel.num_layers=12 # trailing\n").unwrap();
        assert_eq!(c.get("seed"), Some("7"));
        assert_eq!(c.get_or::<usize>("model.num_layers", 0).unwrap(), 12);
        assert_eq!(c.get_or::<f64>("absent", 0.5).unwrap(), 0.5);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(RunConfig::parse("a = 1\nnot a pair\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(RunConfig::parse("a = 1\na = 2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(RunConfig::parse("bad key = 1\n"), Err(Error::Parse { line: 1, .. })));
        let c = RunConfig::parse("n = x\n").unwrap();
        assert!(c.get_or::<usize>("n", 1).is_err());
    }

    #[test]
    fn display_round_trips() {
        let mut c = RunConfig::new();
        c.set("b", 2);
        c.set("a", "x y");
        let text = c.to_string();
        assert_eq!(text, "a = x y\nb = 2\n");
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }
}
