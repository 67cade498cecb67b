//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are consumed by
//! typed getters; [`KvMap::finish`] rejects anything left over, so a typo in
//! a key is reported instead of silently ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: key `{key}`: cannot parse `{value}` as {expected}")]
    InvalidValue { line: usize, key: String, value: String, expected: &'static str },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
}

impl KvError {
    pub fn key(&self) -> Option<&str> {
        match self {
            KvError::Syntax { .. } => None,
            KvError::Duplicate { key, .. } | KvError::InvalidValue { key, .. } | KvError::UnknownKey { key, .. } => {
                Some(key)
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(KvError::Syntax { line, text: trimmed.to_string() });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(KvError::Syntax { line, text: trimmed.to_string() });
            }
            if entries.insert(k.to_string(), (line, v.to_string())).is_some() {
                return Err(KvError::Duplicate { line, key: k.to_string() });
            }
        }
        Ok(Self { entries })
    }

    fn take<T: FromStr>(&mut self, key: &str, expected: &'static str) -> Result<Option<T>, KvError> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|_| KvError::InvalidValue {
                line,
                key: key.to_string(),
                value,
                expected,
            }),
        }
    }

    pub fn usize(&mut self, key: &str) -> Result<Option<usize>, KvError> {
        self.take(key, "a non-negative integer")
    }

    pub fn u64(&mut self, key: &str) -> Result<Option<u64>, KvError> {
        self.take(key, "a non-negative integer")
    }

    pub fn f64(&mut self, key: &str) -> Result<Option<f64>, KvError> {
        let v: Option<f64> = self.take(key, "a real number")?;
        Ok(v)
    }

    pub fn bool(&mut self, key: &str) -> Result<Option<bool>, KvError> {
        self.take(key, "`true` or `false`")
    }

    /// A value restricted to `choices`.
    pub fn choice(&mut self, key: &str, choices: &'static [&'static str]) -> Result<Option<&'static str>, KvError> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, value)) => choices.iter().find(|c| **c == value).copied().map(Some).ok_or_else(|| {
                KvError::InvalidValue { line, key: key.to_string(), value, expected: "one of the documented choices" }
            }),
        }
    }

    /// Fails on the first key no getter consumed.
    pub fn finish(self) -> Result<(), KvError> {
        match self.entries.into_iter().min_by_key(|(_, (line, _))| *line) {
            None => Ok(()),
            Some((key, (line, _))) => Err(KvError::UnknownKey { line, key }),
        }
    }
}

/// Renders `key = value` lines in the given order.
pub fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_consumes() {
        let mut kv = KvMap::parse("# comment\nchannels = 32\n\nalpha=0.5\niterative = true\nkind = l2\n").unwrap();
        assert_eq!(kv.usize("channels").unwrap(), Some(32));
        assert_eq!(kv.f64("alpha").unwrap(), Some(0.5));
        assert_eq!(kv.bool("iterative").unwrap(), Some(true));
        assert_eq!(kv.choice("kind", &["l2", "geometry"]).unwrap(), Some("l2"));
        assert_eq!(kv.usize("missing").unwrap(), None);
        kv.finish().unwrap();
    }

    #[test]
    fn reports_problems_with_lines_and_keys() {
        assert_eq!(
            KvMap::parse("a = 1\nnot a pair\n").unwrap_err(),
            KvError::Syntax { line: 2, text: "not a pair".into() }
        );
        assert!(matches!(KvMap::parse("a = 1\na = 2").unwrap_err(), KvError::Duplicate { line: 2, .. }));
        let mut kv = KvMap::parse("n = ten").unwrap();
        let err = kv.usize("n").unwrap_err();
        assert_eq!(err.key(), Some("n"));
        let kv = KvMap::parse("chanels = 3").unwrap();
        let err = kv.finish().unwrap_err();
        assert!(err.to_string().contains("chanels"), "{err}");
    }

    #[test]
    fn render_round_trips() {
        let text = render(&[("a", "1".into()), ("b", "x".into())]);
        let mut kv = KvMap::parse(&text).unwrap();
        assert_eq!(kv.usize("a").unwrap(), Some(1));
        assert_eq!(kv.choice("b", &["x"]).unwrap(), Some("x"));
    }
}
