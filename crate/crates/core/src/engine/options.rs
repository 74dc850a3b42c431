//! INI-style options file model.
//!
//! Grammar, one construct per line after trimming surrounding whitespace:
//!
//! ```text
//! # comment                       ignored
//! [Section]  or  [Kind "qual"]    starts a section; the bracket content is the section name
//! key=value                       option; split at the first '=', both sides trimmed
//! ```
//!
//! Blank lines are ignored. Values are kept verbatim. Emission writes each
//! section header on its own line, options indented by two spaces, and a blank
//! line between sections, which is the layout of the store's own files.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptionsParseError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: duplicate option `{name}` in section [{section}]")]
    DuplicateOption { line: usize, section: String, name: String },
    #[error("line {line}: duplicate section [{section}]")]
    DuplicateSection { line: usize, section: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionsSection {
    pub name: String,
    pub options: Vec<(String, String)>,
}

impl OptionsSection {
    /// Leading word of the section name: `CFOptions "default"` → `CFOptions`,
    /// `TableOptions/BlockBasedTable "default"` → `TableOptions`.
    pub fn kind(&self) -> &str {
        section_kind(&self.name)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.options.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }
}

pub fn section_kind(name: &str) -> &str {
    let end = name.find([' ', '/', '"']).unwrap_or(name.len());
    &name[..end]
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionsDocument {
    sections: Vec<OptionsSection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionChange {
    pub section: String,
    pub name: String,
    pub old: Option<String>,
    pub new: Option<String>,
}

impl std::fmt::Display for OptionChange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |v: &Option<String>| v.clone().unwrap_or_else(|| "<unset>".into());
        write!(f, "[{}] {}: {} -> {}", self.section, self.name, show(&self.old), show(&self.new))
    }
}

impl OptionsDocument {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, OptionsParseError> {
        let mut doc = OptionsDocument::new();
        let mut seen_sections = HashSet::new();
        let mut seen_names: HashSet<String> = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let Some(inner) = rest.strip_suffix(']') else {
                    return Err(OptionsParseError::Syntax {
                        line: line_no,
                        reason: "section header missing closing ']'".into(),
                    });
                };
                let name = inner.trim();
                if name.is_empty() {
                    return Err(OptionsParseError::Syntax {
                        line: line_no,
                        reason: "empty section name".into(),
                    });
                }
                if !seen_sections.insert(name.to_string()) {
                    return Err(OptionsParseError::DuplicateSection {
                        line: line_no,
                        section: name.to_string(),
                    });
                }
                seen_names.clear();
                doc.sections.push(OptionsSection {
                    name: name.to_string(),
                    options: Vec::new(),
                });
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(OptionsParseError::Syntax {
                    line: line_no,
                    reason: format!("expected `key=value`, got `{line}`"),
                });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(OptionsParseError::Syntax {
                    line: line_no,
                    reason: "empty option name".into(),
                });
            }
            let Some(section) = doc.sections.last_mut() else {
                return Err(OptionsParseError::Syntax {
                    line: line_no,
                    reason: "option outside of any section".into(),
                });
            };
            if !seen_names.insert(key.to_string()) {
                return Err(OptionsParseError::DuplicateOption {
                    line: line_no,
                    section: section.name.clone(),
                    name: key.to_string(),
                });
            }
            section.options.push((key.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", s.name);
            for (k, v) in &s.options {
                let _ = writeln!(out, "  {k}={v}");
            }
        }
        out
    }

    pub fn sections(&self) -> &[OptionsSection] {
        &self.sections
    }

    pub fn section(&self, name: &str) -> Option<&OptionsSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// First section whose kind matches, e.g. `CFOptions` finds `CFOptions "default"`.
    pub fn section_of_kind(&self, kind: &str) -> Option<&OptionsSection> {
        self.sections.iter().find(|s| s.kind() == kind)
    }

    pub fn get(&self, section: &str, name: &str) -> Option<&str> {
        self.section(section)?.get(name)
    }

    /// Looks an option up in the first section of the given kind.
    pub fn get_in_kind(&self, kind: &str, name: &str) -> Option<&str> {
        self.section_of_kind(kind)?.get(name)
    }

    /// Index of the named section, appending an empty one when missing.
    pub fn ensure_section(&mut self, section: &str) -> usize {
        match self.sections.iter().position(|s| s.name == section) {
            Some(i) => i,
            None => {
                self.sections.push(OptionsSection {
                    name: section.to_string(),
                    options: Vec::new(),
                });
                self.sections.len() - 1
            }
        }
    }

    /// Inserts or overwrites; a missing section is appended.
    pub fn set(&mut self, section: &str, name: &str, value: &str) {
        let idx = self.ensure_section(section);
        let opts = &mut self.sections[idx].options;
        match opts.iter_mut().find(|(k, _)| k == name) {
            Some(slot) => slot.1 = value.to_string(),
            None => opts.push((name.to_string(), value.to_string())),
        }
    }

    pub fn remove(&mut self, section: &str, name: &str) -> Option<String> {
        let s = self.sections.iter_mut().find(|s| s.name == section)?;
        let pos = s.options.iter().position(|(k, _)| k == name)?;
        Some(s.options.remove(pos).1)
    }

    /// `(section, name, value)` in document order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.sections.iter().flat_map(|s| {
            s.options
                .iter()
                .map(move |(k, v)| (s.name.as_str(), k.as_str(), v.as_str()))
        })
    }

    pub fn option_count(&self) -> usize {
        self.sections.iter().map(|s| s.options.len()).sum()
    }

    /// Applies a list of changes; `new == None` removes the option.
    pub fn apply(&mut self, changes: &[OptionChange]) {
        for c in changes {
            match &c.new {
                Some(v) => self.set(&c.section, &c.name, v),
                None => {
                    self.remove(&c.section, &c.name);
                }
            }
        }
    }
}

/// Options whose values differ or that exist in only one document. Entries
/// follow `a`'s order, then options only present in `b` in `b`'s order.
pub fn diff_options(a: &OptionsDocument, b: &OptionsDocument) -> Vec<OptionChange> {
    let mut out = Vec::new();
    for (section, name, va) in a.iter() {
        match b.get(section, name) {
            Some(vb) if vb == va => {}
            other => out.push(OptionChange {
                section: section.to_string(),
                name: name.to_string(),
                old: Some(va.to_string()),
                new: other.map(str::to_string),
            }),
        }
    }
    for (section, name, vb) in b.iter() {
        if a.get(section, name).is_none() {
            out.push(OptionChange {
                section: section.to_string(),
                name: name.to_string(),
                old: None,
                new: Some(vb.to_string()),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_option() {
        let d = OptionsDocument::parse("[DBOptions]\nmax_background_jobs=4").unwrap();
        assert_eq!(d.sections().len(), 1);
        assert_eq!(d.option_count(), 1);
        assert_eq!(d.get("DBOptions", "max_background_jobs"), Some("4"));
    }

    #[test]
    fn comments_and_qualified_headers() {
        let text = "# header\n[CFOptions \"default\"]\n  # inner\n  write_buffer_size = 67108864\n\n[TableOptions/BlockBasedTable \"default\"]\n  block_size=4096\n";
        let d = OptionsDocument::parse(text).unwrap();
        assert_eq!(d.sections()[0].kind(), "CFOptions");
        assert_eq!(d.sections()[1].kind(), "TableOptions");
        assert_eq!(d.get_in_kind("CFOptions", "write_buffer_size"), Some("67108864"));
        assert_eq!(OptionsDocument::parse(&d.emit()).unwrap(), d);
    }

    #[test]
    fn duplicate_option_names_line() {
        let err = OptionsDocument::parse("[DBOptions]\na=1\nb=2\na=3\n").unwrap_err();
        assert_eq!(
            err,
            OptionsParseError::DuplicateOption {
                line: 4,
                section: "DBOptions".into(),
                name: "a".into()
            }
        );
    }

    #[test]
    fn same_name_in_two_sections_is_fine() {
        let d = OptionsDocument::parse("[A]\nx=1\n[B]\nx=2\n").unwrap();
        assert_eq!(d.get("B", "x"), Some("2"));
    }

    #[test]
    fn syntax_errors_carry_line() {
        assert!(matches!(
            OptionsDocument::parse("x=1"),
            Err(OptionsParseError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            OptionsDocument::parse("[A]\n\njunk\n"),
            Err(OptionsParseError::Syntax { line: 3, .. })
        ));
        assert!(matches!(
            OptionsDocument::parse("[A\n"),
            Err(OptionsParseError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn values_are_verbatim() {
        let d = OptionsDocument::parse("[A]\ncompression_opts={a=1;b=x y}\n").unwrap();
        assert_eq!(d.get("A", "compression_opts"), Some("{a=1;b=x y}"));
    }

    #[test]
    fn diff_basics() {
        let a = OptionsDocument::parse("[A]\nx=1\ny=2\n").unwrap();
        assert!(diff_options(&a, &a).is_empty());
        let mut b = a.clone();
        b.set("A", "x", "5");
        let d = diff_options(&a, &b);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].old.as_deref(), Some("1"));
        assert_eq!(d[0].new.as_deref(), Some("5"));
        b.remove("A", "y");
        b.set("B", "z", "0");
        assert_eq!(diff_options(&a, &b).len(), 3);
        let mut c = a.clone();
        c.apply(&diff_options(&a, &b));
        assert!(diff_options(&c, &b).is_empty());
    }
}
