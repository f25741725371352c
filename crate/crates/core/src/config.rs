//! Flat `key = value` configuration text.
//!
//! Blank lines and `#` comments are ignored. Every diagnostic names the line
//! it came from.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A config section that accepts some subset of keys.
pub trait KvSection {
    /// Applies one entry; `Ok(false)` means the key belongs to someone else.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    /// Entries that reproduce this section when fed back through [`KvSection::set`].
    fn entries(&self) -> Vec<(&'static str, String)>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>> {
    let mut out: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got `{body}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {line}: missing key")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == k) {
            return Err(Error::Config(format!("line {line}: `{k}` already set on line {}", prev.line)));
        }
        out.push(KvEntry { line, key: k.to_string(), value: v.to_string() });
    }
    Ok(out)
}

/// Feeds every entry of `text` to the first section that claims its key.
pub fn apply_kv(text: &str, sections: &mut [&mut dyn KvSection]) -> Result<()> {
    for e in parse_kv(text)? {
        let mut claimed = false;
        for s in sections.iter_mut() {
            match s.set(&e.key, &e.value) {
                Ok(true) => {
                    claimed = true;
                    break;
                }
                Ok(false) => {}
                Err(err) => return Err(Error::Config(format!("line {}: `{}`: {}", e.line, e.key, strip(err)))),
            }
        }
        if !claimed {
            return Err(Error::Config(format!("line {}: unknown key `{}`", e.line, e.key)));
        }
    }
    Ok(())
}

pub fn render_kv(section: &dyn KvSection) -> String {
    section.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Parses a single value, naming the expected type on failure.
pub fn parse_value<T: FromStr>(value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::Config(format!("invalid value `{value}` ({e})")))
}
