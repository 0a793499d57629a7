// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat `key = value` files. `#` starts a comment. A line `include = path`
//! pulls in another file (relative to the including one) whose keys can be
//! overridden by later lines; included files may not include further.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

fn parse_lines(text: &str, origin: &str, mut on_include: impl FnMut(&str) -> Result<()>) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("{origin}:{}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("{origin}:{}: empty key", i + 1)));
        }
        if k == "include" {
            on_include(v)?;
        } else {
            out.push((k.to_string(), v.to_string()));
        }
    }
    Ok(out)
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses text that may not contain `include` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::new();
        for (k, v) in parse_lines(text, "<config>", |_| Err(Error::config("include is only allowed in files")))? {
            s.set(&k, v);
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let origin = path.display().to_string();
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut s = Self::new();
        let mut pending = Vec::new();
        let own = parse_lines(&text, &origin, |inc| {
            let inc_path = dir.join(inc);
            let inc_text = std::fs::read_to_string(&inc_path)
                .map_err(|e| Error::config(format!("cannot read include {}: {e}", inc_path.display())))?;
            let inc_origin = inc_path.display().to_string();
            pending.extend(parse_lines(&inc_text, &inc_origin, |_| {
                Err(Error::config(format!("{inc_origin}: nested include is not allowed")))
            })?);
            Ok(())
        })?;
        for (k, v) in pending.into_iter().chain(own) {
            s.set(&k, v);
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Marks `key` as consumed and returns its raw value.
    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(format!("key `{key}`: cannot parse {v:?}: {e}"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.take(key)?
            .ok_or_else(|| Error::config(format!("missing required key `{key}`")))
    }

    /// All keys starting with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> Vec<(String, String)> {
        let p = format!("{prefix}.");
        self.values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }

    pub fn mark_section_used(&mut self, prefix: &str) {
        let p = format!("{prefix}.");
        let keys: Vec<String> = self.values.keys().filter(|k| k.starts_with(&p)).cloned().collect();
        self.used.extend(keys);
    }

    /// Errors on the first key that nothing consumed.
    pub fn finish(&self) -> Result<()> {
        match self.values.keys().find(|k| !self.used.contains(*k)) {
            Some(k) => Err(Error::config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
