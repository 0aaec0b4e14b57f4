//! `key=value` line format shared by config files, checkpoint headers,
//! ensemble and grid specs.
//!
//! Blank lines and lines starting with `#` are skipped. Keys and values are
//! trimmed; the first `=` splits a line. Keys may repeat.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// 1-based line number in the source text.
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    pub fn parse_value<T: FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| {
            Error::parse(self.line, format!("bad value for `{}`: {e}", self.key))
        })
    }
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected key=value, got `{line}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::parse(i + 1, "empty key"));
        }
        entries.push(Entry {
            line: i + 1,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(entries)
}

/// Parses a comma-separated list, ignoring empty items.
pub fn parse_list<T: FromStr>(entry: &Entry) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    entry
        .value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            item.parse().map_err(|e: T::Err| {
                Error::parse(entry.line, format!("bad item `{item}` for `{}`: {e}", entry.key))
            })
        })
        .collect()
}
