//! Plain `key = value` text files with optional `[section]` headers.
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Keys before
//! the first header belong to the unnamed section `""`. Sections may repeat;
//! each occurrence is kept separately and in file order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One `[name]` block and its entries in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Section {
    pub name: String,
    entries: Vec<(String, String)>,
    line: usize,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            entries: Vec::new(),
            line: 0,
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| {
            Error::Config(format!("section [{}] is missing `{key}`", self.name))
        })
    }

    /// Parses `key` if present.
    pub fn parse<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|raw| {
                raw.parse::<V>().map_err(|e| {
                    Error::Config(format!(
                        "section [{}] line {}: bad value `{raw}` for `{key}`: {e}",
                        self.name, self.line
                    ))
                })
            })
            .transpose()
    }

    pub fn parse_or<V: FromStr>(&self, key: &str, default: V) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn parse_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: std::fmt::Display,
    {
        let Some(raw) = self.get(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                item.parse::<V>().map_err(|e| {
                    Error::Config(format!(
                        "section [{}]: bad list item `{item}` for `{key}`: {e}",
                        self.name
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Fails on keys outside `allowed`, which catches typos in hand-written files.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (k, _) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!(
                    "section [{}]: unknown key `{k}` (expected one of {})",
                    self.name,
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// A parsed document.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeyValueDoc {
    sections: Vec<Section>,
}

impl KeyValueDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = vec![Section::new("")];
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {lineno}: unterminated section header"))
                })?;
                let mut section = Section::new(name.trim());
                section.line = lineno;
                sections.push(section);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty key")));
            }
            let current = sections.last_mut().expect("root section");
            if current.get(key).is_some() {
                return Err(Error::Config(format!("line {lineno}: duplicate key `{key}`")));
            }
            current.entries.push((key.to_string(), value.trim().to_string()));
            if current.line == 0 {
                current.line = lineno;
            }
        }
        if sections[0].entries.is_empty() && sections.len() > 1 {
            sections.remove(0);
        }
        Ok(Self { sections })
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    /// First section called `name`.
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn sections_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> {
        self.sections.iter().filter(move |s| s.name == name)
    }

    /// Serializes back to text; `parse(render(doc)) == doc` up to line numbers.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, section) in self.sections.iter().enumerate() {
            if !section.name.is_empty() {
                if i > 0 {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{}]", section.name);
            }
            for (k, v) in &section.entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    /// Flattens to `section.key` names, mostly useful for diagnostics.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        for s in &self.sections {
            for (k, v) in &s.entries {
                let key = if s.name.is_empty() {
                    k.clone()
                } else {
                    format!("{}.{k}", s.name)
                };
                map.insert(key, v.clone());
            }
        }
        map
    }
}
