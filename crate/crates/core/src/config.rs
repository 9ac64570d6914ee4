//! `key = value` configuration files.
//!
//! One pair per line, UTF-8. `#` starts a comment, blank lines are ignored,
//! keys may repeat only by mistake (duplicates are errors). Consumers take
//! the keys they know and then call [`KeyValues::finish`], which rejects
//! whatever is left.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{PemoeError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
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
            let (k, v) = line.split_once('=').ok_or_else(|| PemoeError::Parse {
                line: n + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(PemoeError::Parse {
                    line: n + 1,
                    message: "empty key".into(),
                });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(PemoeError::Config {
                    key: k.into(),
                    reason: format!("duplicate key on line {}", n + 1),
                });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PemoeError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn insert(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes and parses `key`, if present.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| PemoeError::Config {
                key: key.into(),
                reason: format!("cannot parse `{v}`: {e}"),
            }),
        }
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn require<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.take(key)?.ok_or_else(|| PemoeError::Config {
            key: key.into(),
            reason: "missing required key".into(),
        })
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            None => Ok(()),
            Some(key) => Err(PemoeError::Config {
                key,
                reason: "unknown key".into(),
            }),
        }
    }
}
