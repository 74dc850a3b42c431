//! Curated option catalog and whitelist validation.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::options::{section_kind, OptionsDocument};

const BUILTIN_CATALOG: &str = include_str!("../../data/option_catalog.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Int,
    Bool,
    Enum,
    SizeBytes,
    Double,
    String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResourceGroup {
    #[serde(rename = "CPU")]
    Cpu,
    Memory,
    Storage,
    Neutral,
}

impl ResourceGroup {
    pub const ALL: [ResourceGroup; 4] = [Self::Cpu, Self::Memory, Self::Storage, Self::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cpu => "CPU",
            Self::Memory => "Memory",
            Self::Storage => "Storage",
            Self::Neutral => "Neutral",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionMeta {
    pub name: String,
    /// Section kind: `DBOptions`, `CFOptions` or `TableOptions`.
    pub section: String,
    pub value_type: ValueType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub allowed: Vec<String>,
    pub mutable_at_runtime: bool,
    pub resource_group: ResourceGroup,
    pub default: String,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("catalog entry `{0}` is defined twice")]
    Duplicate(String),
    #[error("catalog entry `{name}`: {reason}")]
    Invalid { name: String, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogFile {
    catalog_version: u32,
    store: String,
    options: Vec<OptionMeta>,
}

#[derive(Debug, Clone)]
pub struct Catalog {
    pub version: u32,
    pub store: String,
    entries: Vec<OptionMeta>,
    index: BTreeMap<String, usize>,
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let file: CatalogFile = serde_json::from_str(text)?;
        let mut index = BTreeMap::new();
        for (i, m) in file.options.iter().enumerate() {
            if index.insert(m.name.clone(), i).is_some() {
                return Err(CatalogError::Duplicate(m.name.clone()));
            }
            if m.value_type == ValueType::Enum && m.allowed.is_empty() {
                return Err(CatalogError::Invalid {
                    name: m.name.clone(),
                    reason: "enum without allowed values".into(),
                });
            }
            if let Some((lo, hi)) = m.range {
                if lo > hi {
                    return Err(CatalogError::Invalid {
                        name: m.name.clone(),
                        reason: "empty range".into(),
                    });
                }
            }
            if check_value(m, &m.default).is_err() {
                return Err(CatalogError::Invalid {
                    name: m.name.clone(),
                    reason: format!("default `{}` fails its own type/range", m.default),
                });
            }
        }
        Ok(Catalog {
            version: file.catalog_version,
            store: file.store,
            entries: file.options,
            index,
        })
    }

    /// The catalog shipped with the crate.
    pub fn builtin() -> &'static Catalog {
        static CATALOG: OnceLock<Catalog> = OnceLock::new();
        CATALOG.get_or_init(|| Catalog::from_json(BUILTIN_CATALOG).expect("builtin catalog is valid"))
    }

    pub fn get(&self, name: &str) -> Option<&OptionMeta> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[OptionMeta] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_mutable(&self, name: &str) -> bool {
        self.get(name).is_some_and(|m| m.mutable_at_runtime)
    }

    pub fn group(&self, group: ResourceGroup) -> impl Iterator<Item = &OptionMeta> {
        self.entries.iter().filter(move |m| m.resource_group == group)
    }

    /// Full section name an option of this catalog entry lives under in `doc`;
    /// falls back to the store's default naming when the doc lacks the section.
    pub fn section_name_in(&self, doc: &OptionsDocument, meta: &OptionMeta) -> String {
        if let Some(s) = doc.section_of_kind(&meta.section) {
            return s.name.clone();
        }
        match meta.section.as_str() {
            "CFOptions" => "CFOptions \"default\"".into(),
            "TableOptions" => "TableOptions/BlockBasedTable \"default\"".into(),
            other => other.to_string(),
        }
    }

    /// Value of a catalog option in `doc`, or its default when absent.
    pub fn value_in<'a>(&'a self, doc: &'a OptionsDocument, name: &str) -> Option<&'a str> {
        let meta = self.get(name)?;
        doc.get_in_kind(&meta.section, name).or(Some(meta.default.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ViolationAction {
    RemovedUnknown,
    RemovedInvalid { reason: String },
    Clamped { to: String },
    Normalized { to: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub section: String,
    pub name: String,
    pub value: String,
    #[serde(flatten)]
    pub action: ViolationAction,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let what = match &self.action {
            ViolationAction::RemovedUnknown => "removed: not a known option".to_string(),
            ViolationAction::RemovedInvalid { reason } => format!("removed: {reason}"),
            ViolationAction::Clamped { to } => format!("clamped to {to}"),
            ViolationAction::Normalized { to } => format!("normalized to {to}"),
        };
        write!(f, "[{}] {}={}: {}", self.section, self.name, self.value, what)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationOutcome {
    pub doc: OptionsDocument,
    pub violations: Vec<Violation>,
}

/// Outcome of checking one value against its catalog entry.
#[derive(Debug, Clone, PartialEq)]
enum Check {
    Ok,
    Replace(ViolationAction, String),
    Invalid(String),
}

/// Strict whitelist validation. The `[Version]` section is left untouched;
/// every other option must be a catalog entry placed in its catalog section
/// with a well-typed, in-range value. Unknown or ill-typed options are
/// removed, out-of-range values clamped to the nearer bound, and spelling
/// variants (`64MB`, `TRUE`) rewritten to canonical form.
pub fn validate_options(doc: &OptionsDocument, catalog: &Catalog) -> ValidationOutcome {
    let mut out = OptionsDocument::new();
    let mut violations = Vec::new();
    for s in doc.sections() {
        let kind = section_kind(&s.name);
        out.ensure_section(&s.name);
        for (name, value) in &s.options {
            if kind == "Version" {
                out.set(&s.name, name, value);
                continue;
            }
            let meta = match catalog.get(name) {
                Some(m) if m.section == kind => m,
                _ => {
                    violations.push(Violation {
                        section: s.name.clone(),
                        name: name.clone(),
                        value: value.clone(),
                        action: ViolationAction::RemovedUnknown,
                    });
                    continue;
                }
            };
            match check_value(meta, value) {
                Ok(Check::Ok) => out.set(&s.name, name, value),
                Ok(Check::Replace(action, repaired)) => {
                    out.set(&s.name, name, &repaired);
                    violations.push(Violation {
                        section: s.name.clone(),
                        name: name.clone(),
                        value: value.clone(),
                        action,
                    });
                }
                Ok(Check::Invalid(reason)) | Err(reason) => violations.push(Violation {
                    section: s.name.clone(),
                    name: name.clone(),
                    value: value.clone(),
                    action: ViolationAction::RemovedInvalid { reason },
                }),
            }
        }
    }
    ValidationOutcome { doc: out, violations }
}

/// True when the value is already canonical and in range for this entry.
pub fn value_is_valid(meta: &OptionMeta, value: &str) -> bool {
    matches!(check_value(meta, value), Ok(Check::Ok))
}

fn check_value(meta: &OptionMeta, value: &str) -> Result<Check, String> {
    match meta.value_type {
        ValueType::Int => {
            let v: i64 = value
                .parse()
                .map_err(|_| format!("`{value}` is not an integer"))?;
            Ok(clamp_integer(meta, v as f64, value))
        }
        ValueType::SizeBytes => {
            let (v, canonical) = parse_size(value).ok_or_else(|| format!("`{value}` is not a byte size"))?;
            match clamp_integer(meta, v as f64, value) {
                Check::Ok if !canonical => Ok(Check::Replace(
                    ViolationAction::Normalized { to: v.to_string() },
                    v.to_string(),
                )),
                other => Ok(other),
            }
        }
        ValueType::Double => {
            let v: f64 = value
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| format!("`{value}` is not a number"))?;
            if let Some((lo, hi)) = meta.range {
                let bound = if v < lo {
                    Some(lo)
                } else if v > hi {
                    Some(hi)
                } else {
                    None
                };
                if let Some(b) = bound {
                    let s = format!("{b:.6}");
                    return Ok(Check::Replace(ViolationAction::Clamped { to: s.clone() }, s));
                }
            }
            Ok(Check::Ok)
        }
        ValueType::Bool => match value {
            "true" | "false" => Ok(Check::Ok),
            _ => {
                let canon = match value.to_ascii_lowercase().as_str() {
                    "true" | "1" | "yes" | "on" => "true",
                    "false" | "0" | "no" | "off" => "false",
                    _ => return Err(format!("`{value}` is not a boolean")),
                };
                Ok(Check::Replace(
                    ViolationAction::Normalized { to: canon.into() },
                    canon.into(),
                ))
            }
        },
        ValueType::Enum => {
            if meta.allowed.iter().any(|a| a == value) {
                return Ok(Check::Ok);
            }
            match meta.allowed.iter().find(|a| a.eq_ignore_ascii_case(value)) {
                Some(a) => Ok(Check::Replace(
                    ViolationAction::Normalized { to: a.clone() },
                    a.clone(),
                )),
                None => Ok(Check::Invalid(format!(
                    "`{value}` is not one of {}",
                    meta.allowed.join(", ")
                ))),
            }
        }
        ValueType::String => {
            if value.contains('\n') {
                Err("multi-line value".into())
            } else {
                Ok(Check::Ok)
            }
        }
    }
}

fn clamp_integer(meta: &OptionMeta, v: f64, original: &str) -> Check {
    if let Some((lo, hi)) = meta.range {
        let bound = if v < lo {
            Some(lo)
        } else if v > hi {
            Some(hi)
        } else {
            None
        };
        if let Some(b) = bound {
            let s = format!("{}", b as i64);
            return Check::Replace(ViolationAction::Clamped { to: s.clone() }, s);
        }
    }
    if original.starts_with('+') {
        let s = format!("{}", v as i64);
        return Check::Replace(ViolationAction::Normalized { to: s.clone() }, s);
    }
    Check::Ok
}

/// Parses a byte size: a plain non-negative integer, or a number with a binary
/// suffix (`k`, `kb`, `m`, `mb`, `g`, `gb`, `t`, `tb`, case-insensitive).
/// The flag is true when the input was already a plain integer.
pub fn parse_size(value: &str) -> Option<(u64, bool)> {
    if let Ok(v) = value.parse::<u64>() {
        return Some((v, !value.starts_with('+')));
    }
    let lower = value.trim().to_ascii_lowercase();
    let digits_end = lower
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(lower.len());
    let (num, suffix) = lower.split_at(digits_end);
    let mult: u64 = match suffix.trim() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        "t" | "tb" | "tib" => 1 << 40,
        _ => return None,
    };
    let n: f64 = num.parse().ok()?;
    let bytes = n * mult as f64;
    if !bytes.is_finite() || bytes < 0.0 || bytes > u64::MAX as f64 {
        return None;
    }
    Some((bytes.round() as u64, false))
}

pub fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat() -> &'static Catalog {
        Catalog::builtin()
    }

    #[test]
    fn builtin_loads() {
        let c = cat();
        assert!(c.len() >= 55, "{}", c.len());
        let m = c.get("max_background_jobs").unwrap();
        assert_eq!(m.range, Some((1.0, 64.0)));
        assert!(m.mutable_at_runtime);
        assert!(!c.is_mutable("num_levels"));
        for g in ResourceGroup::ALL {
            assert!(c.group(g).count() > 0, "{g:?}");
        }
    }

    #[test]
    fn invented_option_removed() {
        let d = OptionsDocument::parse("[DBOptions]\nturbo_mode=true\nmax_background_jobs=4\n").unwrap();
        let v = validate_options(&d, cat());
        assert_eq!(v.violations.len(), 1);
        assert_eq!(v.violations[0].action, ViolationAction::RemovedUnknown);
        assert_eq!(v.doc.get("DBOptions", "turbo_mode"), None);
        assert_eq!(v.doc.get("DBOptions", "max_background_jobs"), Some("4"));
    }

    #[test]
    fn negative_jobs_clamped() {
        let d = OptionsDocument::parse("[DBOptions]\nmax_background_jobs=-3\n").unwrap();
        let v = validate_options(&d, cat());
        assert_eq!(v.doc.get("DBOptions", "max_background_jobs"), Some("1"));
        assert_eq!(v.violations.len(), 1);
        assert!(validate_options(&v.doc, cat()).violations.is_empty());
    }

    #[test]
    fn misplaced_option_removed() {
        let d = OptionsDocument::parse("[DBOptions]\nwrite_buffer_size=1048576\n").unwrap();
        let v = validate_options(&d, cat());
        assert_eq!(v.violations[0].action, ViolationAction::RemovedUnknown);
    }

    #[test]
    fn spellings_normalized() {
        let d = OptionsDocument::parse(
            "[CFOptions \"default\"]\nwrite_buffer_size=128MB\ndisable_auto_compactions=TRUE\ncompression=kzstd\n",
        )
        .unwrap();
        let v = validate_options(&d, cat());
        assert_eq!(v.violations.len(), 3);
        assert_eq!(v.doc.get("CFOptions \"default\"", "write_buffer_size"), Some("134217728"));
        assert_eq!(v.doc.get("CFOptions \"default\"", "disable_auto_compactions"), Some("true"));
        assert_eq!(v.doc.get("CFOptions \"default\"", "compression"), Some("kZSTD"));
        assert!(validate_options(&v.doc, cat()).violations.is_empty());
    }

    #[test]
    fn type_invalid_removed() {
        let d = OptionsDocument::parse("[DBOptions]\nmax_background_jobs=lots\n[CFOptions \"default\"]\ncompression=kMagic\n").unwrap();
        let v = validate_options(&d, cat());
        assert_eq!(v.violations.len(), 2);
        assert_eq!(v.doc.option_count(), 0);
        assert_eq!(v.doc.sections().len(), 2);
    }

    #[test]
    fn double_clamp() {
        let d = OptionsDocument::parse("[CFOptions \"default\"]\nmax_bytes_for_level_multiplier=1.5\n").unwrap();
        let v = validate_options(&d, cat());
        assert_eq!(
            v.doc.get("CFOptions \"default\"", "max_bytes_for_level_multiplier"),
            Some("2.000000")
        );
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4096"), Some((4096, true)));
        assert_eq!(parse_size("64k"), Some((65536, false)));
        assert_eq!(parse_size("1.5 GB"), Some((1610612736, false)));
        assert_eq!(parse_size("-1"), None);
        assert_eq!(parse_size("lots"), None);
    }
}
