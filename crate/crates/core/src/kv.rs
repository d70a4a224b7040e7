//! `key = value` text files: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("unknown key {0:?}")]
    Unknown(String),
    #[error("key {key:?}: cannot parse {value:?}: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("missing key {0:?}")]
    Missing(String),
}

/// Parsed pairs. Keys are consumed with [`KvMap::take`] so leftovers can be
/// reported as unknown.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(KvError::Syntax { line: n + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(KvError::Syntax { line: n + 1 });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(KvError::Duplicate {
                    line: n + 1,
                    key: k.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, KvError>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(value) => value.parse().map(Some).map_err(|e: T::Err| KvError::Value {
                key: key.to_string(),
                msg: e.to_string(),
                value,
            }),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), KvError>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T, KvError>
    where
        T::Err: Display,
    {
        self.take(key)?.ok_or_else(|| KvError::Missing(key.to_string()))
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<(), KvError> {
        match self.entries.into_keys().next() {
            Some(k) => Err(KvError::Unknown(k)),
            None => Ok(()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let mut m = KvMap::parse("# header\nsteps = 30 # trailing\n\nname=x\n").unwrap();
        assert_eq!(m.take::<usize>("steps").unwrap(), Some(30));
        assert_eq!(m.require::<String>("name").unwrap(), "x");
        assert!(m.finish().is_ok());
    }

    #[test]
    fn reports_errors() {
        assert_eq!(KvMap::parse("a = 1\nnoequals\n"), Err(KvError::Syntax { line: 2 }));
        assert!(matches!(KvMap::parse("a=1\na=2"), Err(KvError::Duplicate { line: 2, .. })));
        let mut m = KvMap::parse("a = x\nb = 1").unwrap();
        assert!(matches!(m.take::<u32>("a"), Err(KvError::Value { .. })));
        assert_eq!(m.finish(), Err(KvError::Unknown("b".into())));
    }

    #[test]
    fn text_round_trip() {
        let mut m = KvMap::default();
        m.set("z", 1.5);
        m.set("a", "v");
        assert_eq!(KvMap::parse(&m.to_text()).unwrap(), m);
    }
}
