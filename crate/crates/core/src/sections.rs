//! Reader for the INI-like text format used by grammar and experiment files:
//! `[section]` headers, one entry per line, `#` starts a comment line.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub text: String,
}

impl Entry {
    /// Splits `key = value`, trimming both sides.
    pub fn key_value(&self, file: &str) -> Result<(&str, &str)> {
        let (k, v) = self
            .text
            .split_once('=')
            .ok_or_else(|| Error::parse(file, self.line, format!("expected `key = value`, found `{}`", self.text)))?;
        Ok((k.trim(), v.trim()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(file: &str, text: &str) -> Result<Self> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if let Some(name) = t.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(file, line, "unterminated section header"))?
                    .trim();
                if sections.iter().any(|s| s.name == name) {
                    return Err(Error::parse(file, line, format!("duplicate section [{name}]")));
                }
                sections.push(Section { name: name.to_string(), line, entries: Vec::new() });
                continue;
            }
            let section = sections
                .last_mut()
                .ok_or_else(|| Error::parse(file, line, "entry before the first [section]"))?;
            section.entries.push(Entry { line, text: t.to_string() });
        }
        Ok(Self { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}
