//! Turning free-form advisor replies into a validated options delta.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::engine::{
    section_kind, validate_options, Catalog, OptionChange, OptionsDocument, Violation, ViolationAction,
};

/// section → option name → new value.
pub type OptionDelta = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorResponse {
    pub raw_text: String,
    pub extracted_delta: OptionDelta,
    pub violations: Vec<Violation>,
    pub usable: bool,
}

impl AdvisorResponse {
    pub fn changed_count(&self) -> usize {
        delta_len(&self.extracted_delta)
    }
}

pub fn delta_len(delta: &OptionDelta) -> usize {
    delta.values().map(BTreeMap::len).sum()
}

/// Changes `delta` would make to `base`, in delta order.
pub fn delta_changes(base: &OptionsDocument, delta: &OptionDelta) -> Vec<OptionChange> {
    let mut out = Vec::new();
    for (section, opts) in delta {
        for (name, value) in opts {
            let old = base.get(section, name).map(str::to_string);
            if old.as_deref() != Some(value.as_str()) {
                out.push(OptionChange {
                    section: section.clone(),
                    name: name.clone(),
                    old,
                    new: Some(value.clone()),
                });
            }
        }
    }
    out
}

pub fn apply_delta(base: &OptionsDocument, delta: &OptionDelta) -> OptionsDocument {
    let mut doc = base.clone();
    for (section, opts) in delta {
        for (name, value) in opts {
            doc.set(section, name, value);
        }
    }
    doc
}

/// Parses the last fenced block holding `name=value` lines, or when the reply
/// has no such block, every line shaped like `name=value` or `[Section]`.
/// Options land in their catalog section (as named in `base`) wherever the
/// reply put them; the result is whitelisted by [`validate_options`] and
/// reduced to entries that differ from `base`.
pub fn extract_options(raw_text: &str, base: &OptionsDocument, catalog: &Catalog) -> AdvisorResponse {
    let lines = match last_fenced_block(raw_text) {
        Some(block) => block,
        None => raw_text.lines().collect(),
    };
    let mut proposal = OptionsDocument::new();
    let mut violations = Vec::new();
    let mut section_hint: Option<String> = None;
    for line in lines {
        match classify(line) {
            Line::Section(s) => section_hint = Some(s.to_string()),
            Line::Assign(name, value) => {
                let hinted_kind = section_hint.as_deref().map(section_kind);
                if hinted_kind == Some("Version") {
                    continue;
                }
                match catalog.get(name) {
                    Some(meta) => {
                        let section = catalog.section_name_in(base, meta);
                        proposal.set(&section, name, value);
                    }
                    None => violations.push(Violation {
                        section: section_hint.clone().unwrap_or_default(),
                        name: name.to_string(),
                        value: value.to_string(),
                        action: ViolationAction::RemovedUnknown,
                    }),
                }
            }
            Line::Other => {}
        }
    }
    let outcome = validate_options(&proposal, catalog);
    violations.extend(outcome.violations);
    let mut delta = OptionDelta::new();
    for (section, name, value) in outcome.doc.iter() {
        if base.get(section, name) != Some(value) {
            delta
                .entry(section.to_string())
                .or_default()
                .insert(name.to_string(), value.to_string());
        }
    }
    debug!("extracted {} changes, {} violations", delta_len(&delta), violations.len());
    AdvisorResponse {
        raw_text: raw_text.to_string(),
        usable: !delta.is_empty(),
        extracted_delta: delta,
        violations,
    }
}

/// Content of the last ``` block that contains at least one assignment. An
/// unterminated final fence runs to the end of the text.
fn last_fenced_block(text: &str) -> Option<Vec<&str>> {
    let mut blocks: Vec<Vec<&str>> = Vec::new();
    let mut open: Option<Vec<&str>> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match open.take() {
                Some(block) => blocks.push(block),
                None => open = Some(Vec::new()),
            }
        } else if let Some(block) = open.as_mut() {
            block.push(line);
        }
    }
    if let Some(block) = open {
        blocks.push(block);
    }
    blocks
        .into_iter()
        .rev()
        .find(|b| b.iter().any(|l| matches!(classify(l), Line::Assign(..))))
}

enum Line<'a> {
    Section(&'a str),
    Assign(&'a str, &'a str),
    Other,
}

fn classify(raw: &str) -> Line<'_> {
    let mut line = raw.trim();
    for bullet in ["- ", "* ", "+ "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            line = rest.trim_start();
        }
    }
    let line = line.trim_matches('`').trim();
    if line.starts_with('#') || line.starts_with(';') || line.starts_with("//") {
        return Line::Other;
    }
    if let Some(inner) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let inner = inner.trim();
        return if inner.is_empty() { Line::Other } else { Line::Section(inner) };
    }
    let Some((k, v)) = line.split_once('=') else {
        return Line::Other;
    };
    let mut name = k.trim();
    // `CFOptions.write_buffer_size` style qualification
    if let Some((_, last)) = name.rsplit_once('.') {
        name = last;
    }
    let name_ok = !name.is_empty()
        && name.starts_with(|c: char| c.is_ascii_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if !name_ok {
        return Line::Other;
    }
    let mut value = v.trim();
    for marker in [" #", " //", "\t#"] {
        if let Some(pos) = value.find(marker) {
            value = value[..pos].trim_end();
        }
    }
    let value = value
        .trim_end_matches([';', ','])
        .trim()
        .trim_matches(|c| c == '"' || c == '\'' || c == '`');
    if value.is_empty() {
        return Line::Other;
    }
    Line::Assign(name, value)
}

/// Option set by two or more prompts of one strategy round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeConflict {
    pub section: String,
    pub name: String,
    pub kept: String,
    pub kept_from: usize,
    pub dropped: String,
    pub dropped_from: usize,
}

/// Merges per-prompt deltas in prompt order; when two prompts set the same
/// option to different values the earlier one wins.
pub fn merge_deltas<'a, I>(deltas: I) -> (OptionDelta, Vec<MergeConflict>)
where
    I: IntoIterator<Item = &'a OptionDelta>,
{
    let mut merged = OptionDelta::new();
    let mut origin: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut conflicts = Vec::new();
    for (i, delta) in deltas.into_iter().enumerate() {
        for (section, opts) in delta {
            for (name, value) in opts {
                let key = (section.clone(), name.clone());
                match merged.get(section).and_then(|m| m.get(name)) {
                    None => {
                        merged
                            .entry(section.clone())
                            .or_default()
                            .insert(name.clone(), value.clone());
                        origin.insert(key, i);
                    }
                    Some(kept) if kept != value => conflicts.push(MergeConflict {
                        section: section.clone(),
                        name: name.clone(),
                        kept: kept.clone(),
                        kept_from: origin[&key],
                        dropped: value.clone(),
                        dropped_from: i,
                    }),
                    Some(_) => {}
                }
            }
        }
    }
    (merged, conflicts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::default_options;

    fn cat() -> &'static Catalog {
        Catalog::builtin()
    }

    #[test]
    fn fenced_block_with_one_change() {
        let base = default_options();
        let raw = "Try this:\n```ini\n[CFOptions \"default\"]\n  write_buffer_size=134217728\n```\nGood luck.";
        let r = extract_options(raw, &base, cat());
        assert!(r.usable);
        assert_eq!(r.changed_count(), 1);
        assert_eq!(r.extracted_delta["CFOptions \"default\""]["write_buffer_size"], "134217728");
        assert!(r.violations.is_empty());
    }

    #[test]
    fn prose_only_is_unusable() {
        let r = extract_options("I think the config is fine as is.", &default_options(), cat());
        assert!(!r.usable);
        assert!(r.extracted_delta.is_empty());
    }

    #[test]
    fn last_block_wins() {
        let raw = "```\nmax_background_jobs=4\n```\nactually:\n```\nmax_background_jobs=6\n```";
        let r = extract_options(raw, &default_options(), cat());
        assert_eq!(r.extracted_delta["DBOptions"]["max_background_jobs"], "6");
    }

    #[test]
    fn unfenced_lines_and_misplaced_sections() {
        let raw = "Set these:\n[DBOptions]\nwrite_buffer_size = 64MB\n- max_background_jobs: 4\nmax_background_jobs=4";
        let r = extract_options(raw, &default_options(), cat());
        assert_eq!(r.extracted_delta["DBOptions"]["max_background_jobs"], "4");
        // relocated to its own section and normalized
        assert_eq!(
            r.extracted_delta.get("CFOptions \"default\"").and_then(|m| m.get("write_buffer_size")),
            None,
            "64MB equals the default once normalized"
        );
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v.action, ViolationAction::Normalized { .. })));
    }

    #[test]
    fn invented_and_out_of_range_options() {
        let raw = "```\n[DBOptions]\n  turbo_mode=true\n  max_background_jobs=999\n[Version]\n  rocksdb_version=9.9\n```";
        let r = extract_options(raw, &default_options(), cat());
        assert_eq!(r.extracted_delta["DBOptions"]["max_background_jobs"], "64");
        assert_eq!(r.changed_count(), 1);
        assert!(r.violations.iter().any(|v| v.name == "turbo_mode"));
    }

    #[test]
    fn unchanged_values_are_not_a_delta() {
        let r = extract_options("```\nmax_background_jobs=2\n```", &default_options(), cat());
        assert!(!r.usable);
    }

    #[test]
    fn merge_earlier_wins() {
        let mut a = OptionDelta::new();
        a.entry("DBOptions".into()).or_default().insert("x".into(), "1".into());
        let mut b = OptionDelta::new();
        b.entry("DBOptions".into()).or_default().insert("x".into(), "2".into());
        b.entry("DBOptions".into()).or_default().insert("y".into(), "3".into());
        let (m, c) = merge_deltas([&a, &b]);
        assert_eq!(m["DBOptions"]["x"], "1");
        assert_eq!(m["DBOptions"]["y"], "3");
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].kept_from, c[0].dropped_from), (0, 1));
    }

    #[test]
    fn apply_and_changes_agree() {
        let base = default_options();
        let r = extract_options("```\nmax_background_jobs=8\nblock_cache_size=1GB\n```", &base, cat());
        let doc = apply_delta(&base, &r.extracted_delta);
        let changes = delta_changes(&base, &r.extracted_delta);
        assert_eq!(crate::engine::diff_options(&base, &doc), changes);
        assert_eq!(changes.len(), 2);
    }
}
