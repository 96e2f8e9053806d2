//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment. Lists are
//! whitespace-separated. A scalar written with a decimal comma (`93,0405`)
//! is read as `93.0405`.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Replaces a lone decimal comma (`12,5`, `-0,25e-3`) with a point.
pub fn normalize_decimal(raw: &str) -> String {
    let s = raw.trim();
    if s.matches(',').count() == 1 && !s.contains('.') {
        let (a, b) = s.split_once(',').unwrap();
        let int_ok = !a.is_empty() && a.trim_start_matches(['+', '-']).chars().all(|c| c.is_ascii_digit());
        let frac_ok = b.chars().next().is_some_and(|c| c.is_ascii_digit());
        if int_ok && frac_ok {
            return format!("{a}.{b}");
        }
    }
    s.to_string()
}

/// Parses a float, accepting a decimal comma.
pub fn parse_decimal(raw: &str) -> std::result::Result<f64, String> {
    normalize_decimal(raw).parse::<f64>().map_err(|_| format!("`{raw}` is not a number"))
}

#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    used: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected `key = value`, found `{line}`") })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse { line: i + 1, message: "empty key".into() });
            }
            let value = v.trim().trim_matches('"').to_string();
            if entries.insert(key.clone(), (i + 1, value)).is_some() {
                return Err(Error::config(key, format!("set twice (line {})", i + 1)));
            }
        }
        Ok(Self { entries, used: RefCell::default() })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => parse_decimal(v).map(Some).map_err(|m| Error::config(key, m)),
        }
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split_whitespace()
                .map(|t| parse_decimal(t).map_err(|m| Error::config(key, m)))
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Errors on the first key no getter has asked for.
    pub fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(Error::config(k.clone(), "unknown key")),
            None => Ok(()),
        }
    }
}
