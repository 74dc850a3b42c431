//! Deterministic rule-based advisor.
//!
//! Reads the sections of a prompt built by this crate and answers with the
//! changes a handful of rules from the RocksDB tuning guide call for. Rules
//! only touch options listed under Current options, so the prompt's scope
//! (subset, resource group, mutable-only) is respected by construction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::engine::{parse_size, Catalog, ValueType};

use super::{Advisor, AdvisorError};

const MIB: u64 = 1 << 20;
const DEFAULT_CORES: u64 = 8;
const DEFAULT_MEM: u64 = 8 << 30;

/// Fraction of operations that must be reads or writes for the read- or
/// write-oriented rules to fire.
const HEAVY: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ScriptedAdvisor {
    catalog: Catalog,
}

impl Default for ScriptedAdvisor {
    fn default() -> Self {
        ScriptedAdvisor {
            catalog: Catalog::builtin().clone(),
        }
    }
}

impl ScriptedAdvisor {
    pub fn new(catalog: Catalog) -> Self {
        ScriptedAdvisor { catalog }
    }

    /// The rule table as a pure function of the prompt text.
    pub fn respond(&self, prompt: &str) -> String {
        let view = PromptView::parse(prompt);
        let mut plan = Plan::new(&view);
        if let Some(step) = view.fine_tune_step {
            self.fine_tune(&view, step, &mut plan);
        } else if view.shift.is_some() {
            realtime_rules(&view, &mut plan);
        } else {
            tuning_rules(&view, &mut plan);
        }
        plan.render(&self.catalog)
    }

    fn fine_tune(&self, view: &PromptView, step: u32, plan: &mut Plan) {
        let factor = if step % 2 == 1 { 1.25 } else { 0.8 };
        for (_, name, value) in &view.options {
            let Some(meta) = self.catalog.get(name) else { continue };
            let next = match meta.value_type {
                ValueType::Int => value.parse::<i64>().ok().map(|v| {
                    let scaled = (v as f64 * factor).round() as i64;
                    let moved = if scaled == v { v + if factor > 1.0 { 1 } else { -1 } } else { scaled };
                    moved.to_string()
                }),
                ValueType::SizeBytes => parse_size(value).map(|(v, _)| ((v as f64 * factor).round() as u64).to_string()),
                ValueType::Double => value.parse::<f64>().ok().map(|v| format!("{:.6}", v * factor)),
                _ => None,
            };
            if let Some(next) = next {
                plan.set(name, next);
            }
        }
    }
}

impl Advisor for ScriptedAdvisor {
    fn complete(&mut self, prompt: &str) -> Result<String, AdvisorError> {
        Ok(self.respond(prompt))
    }
}

fn tuning_rules(v: &PromptView, plan: &mut Plan) {
    let cores = v.resource("cpu_cores").unwrap_or(DEFAULT_CORES).max(2);
    let mem = v.resource("mem_bytes").unwrap_or(DEFAULT_MEM);
    let writes = v.write_fraction();
    let reads = v.read_fraction();
    let stalls = v.metric("write_stall_micros").unwrap_or(0.0) > 0.0;

    // background work should keep up with flushes and compactions: one job per core
    if stalls {
        if let Some(jobs) = v.int("max_background_jobs") {
            let target = (jobs * 2).min(cores as i64);
            if target > jobs {
                plan.set("max_background_jobs", target.to_string());
            }
        }
        if let Some(slow) = v.int("level0_slowdown_writes_trigger") {
            if slow < 32 {
                plan.set("level0_slowdown_writes_trigger", "32".into());
                if v.int("level0_stop_writes_trigger").is_some_and(|s| s < 48) {
                    plan.set("level0_stop_writes_trigger", "48".into());
                }
            }
        }
    }
    if writes >= HEAVY {
        let cap = (128 * MIB).min(mem / 8);
        if let Some(wbs) = v.size("write_buffer_size") {
            if wbs < cap {
                plan.set("write_buffer_size", (wbs * 2).min(cap).to_string());
            }
        }
        if v.int("max_write_buffer_number").is_some_and(|n| n < 4) {
            plan.set("max_write_buffer_number", "4".into());
        }
        // L1 target sized to what one L0 compaction brings in
        if let (Some(wbs), Some(base)) = (v.size("write_buffer_size"), v.size("max_bytes_for_level_base")) {
            let wbs = plan.size_after("write_buffer_size").unwrap_or(wbs);
            let merge = v.int("min_write_buffer_number_to_merge").unwrap_or(1).max(1) as u64;
            let trigger = v.int("level0_file_num_compaction_trigger").unwrap_or(4).max(1) as u64;
            let want = wbs * merge * trigger;
            if base < want / 2 || base > want * 2 {
                plan.set("max_bytes_for_level_base", want.to_string());
            }
        }
        if v.size("bytes_per_sync") == Some(0) {
            plan.set("bytes_per_sync", MIB.to_string());
        }
    }
    if reads >= HEAVY {
        if v.metric("block_cache_hit_ratio").unwrap_or(0.0) < 0.95 {
            let cap = mem / 4;
            let current = v
                .size("block_cache_size")
                .or_else(|| v.has_section_kind("TableOptions").then_some(8 * MIB));
            if let Some(cache) = current {
                if cache < cap {
                    plan.set("block_cache_size", (cache * 4).min(cap).to_string());
                }
            }
        }
        if v.value("filter_policy").is_some_and(|p| !p.to_ascii_lowercase().contains("bloom")) {
            plan.set("filter_policy", "bloomfilter:10:false".into());
        }
    }
    // heavy codecs cost CPU on every flush and compaction
    let busy = v.metric("cpu_percent").is_some_and(|c| c > 0.8 * 100.0 * cores as f64);
    if busy || stalls {
        if let Some(c) = v.value("compression") {
            if matches!(c, "kZlibCompression" | "kBZip2Compression" | "kZSTD" | "kLZ4HCCompression") {
                plan.set("compression", "kLZ4Compression".into());
            }
        }
    }
}

fn realtime_rules(v: &PromptView, plan: &mut Plan) {
    let Some(shift) = &v.shift else { return };
    let cores = v.resource("cpu_cores").unwrap_or(DEFAULT_CORES).max(2);
    let mem = v.resource("mem_bytes").unwrap_or(DEFAULT_MEM);
    let frac = |mix: &BTreeMap<String, f64>, ops: &[&str]| ops.iter().map(|o| mix.get(*o).copied().unwrap_or(0.0)).sum::<f64>();
    let reads_now = frac(&shift.observed, &["get", "seek"]);
    let reads_before = frac(&shift.previous, &["get", "seek"]);
    let writes_now = frac(&shift.observed, &["put", "merge", "delete"]);
    let writes_before = frac(&shift.previous, &["put", "merge", "delete"]);
    if reads_now > reads_before {
        if let Some(cache) = v.size("block_cache_size") {
            let cap = mem / 4;
            if cache < cap {
                plan.set("block_cache_size", (cache * 2).min(cap).to_string());
            }
        }
    }
    if writes_now > writes_before {
        if let Some(wbs) = v.size("write_buffer_size") {
            let cap = (256 * MIB).min(mem / 8);
            if wbs < cap {
                plan.set("write_buffer_size", (wbs * 2).min(cap).to_string());
            }
        }
    }
    if shift.underutilized {
        if let Some(jobs) = v.int("max_background_jobs") {
            if jobs < cores as i64 {
                plan.set("max_background_jobs", (jobs + 1).to_string());
            }
        }
    }
}

#[derive(Debug, Default)]
struct Shift {
    observed: BTreeMap<String, f64>,
    previous: BTreeMap<String, f64>,
    underutilized: bool,
}

/// The parts of a prompt the rules look at.
#[derive(Debug, Default)]
struct PromptView {
    resources: BTreeMap<String, String>,
    metrics: BTreeMap<String, f64>,
    workload_mix: BTreeMap<String, f64>,
    realized_mix: BTreeMap<String, f64>,
    /// (section, name, value) as listed under Current options.
    options: Vec<(String, String, String)>,
    /// Options named in a degradation notice with their pre-change values.
    reverts: Vec<(String, Option<String>, Option<String>)>,
    fine_tune_step: Option<u32>,
    shift: Option<Shift>,
}

impl PromptView {
    fn parse(text: &str) -> Self {
        let mut v = PromptView::default();
        let mut title = "";
        let mut section = String::new();
        for line in text.lines() {
            if let Some(t) = line.strip_prefix("## ") {
                title = t.trim();
                if title == "Workload shift" {
                    v.shift = Some(Shift::default());
                }
                continue;
            }
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with("```") {
                continue;
            }
            match title {
                "Workload" => {
                    if let Some(m) = trimmed.strip_prefix("operation mix:") {
                        v.workload_mix = parse_mix(m);
                    }
                }
                "Resources" => {
                    if let Some((k, val)) = trimmed.split_once(" = ") {
                        v.resources.insert(k.to_string(), val.to_string());
                    }
                }
                "Latest result" | "Latest telemetry" => {
                    if let Some(m) = trimmed.strip_prefix("realized mix:") {
                        v.realized_mix = parse_mix(m);
                    } else if let Some((k, val)) = trimmed.split_once(" = ") {
                        if let Ok(x) = val.parse() {
                            v.metrics.insert(k.to_string(), x);
                        }
                    }
                }
                "Notice" => {
                    if let Some(change) = parse_change(trimmed) {
                        v.reverts.push(change);
                    }
                }
                "Fine-tune" => {
                    if let Some(s) = trimmed.strip_prefix("step = ") {
                        v.fine_tune_step = s.parse().ok();
                    }
                }
                "Workload shift" => {
                    let shift = v.shift.get_or_insert_with(Shift::default);
                    if let Some(m) = trimmed.strip_prefix("observed mix:") {
                        shift.observed = parse_mix(m);
                    } else if let Some(m) = trimmed.strip_prefix("previous mix:") {
                        shift.previous = parse_mix(m);
                    } else if trimmed.starts_with("cpu underutilized") {
                        shift.underutilized = true;
                    }
                }
                "Current options" => {
                    if let Some(s) = trimmed.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                        section = s.to_string();
                    } else if let Some((k, val)) = trimmed.split_once('=') {
                        v.options.push((section.clone(), k.trim().to_string(), val.trim().to_string()));
                    }
                }
                _ => {}
            }
        }
        v
    }

    fn resource(&self, name: &str) -> Option<u64> {
        self.resources.get(name)?.parse().ok().filter(|x| *x > 0)
    }

    fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    fn value(&self, name: &str) -> Option<&str> {
        self.options.iter().find(|(_, n, _)| n == name).map(|(_, _, v)| v.as_str())
    }

    fn int(&self, name: &str) -> Option<i64> {
        self.value(name)?.parse().ok()
    }

    fn size(&self, name: &str) -> Option<u64> {
        parse_size(self.value(name)?).map(|(n, _)| n)
    }

    fn has_section_kind(&self, kind: &str) -> bool {
        self.options.iter().any(|(s, _, _)| crate::engine::section_kind(s) == kind)
    }

    fn mix(&self) -> &BTreeMap<String, f64> {
        if self.realized_mix.is_empty() {
            &self.workload_mix
        } else {
            &self.realized_mix
        }
    }

    fn write_fraction(&self) -> f64 {
        ["put", "merge", "delete"].iter().filter_map(|o| self.mix().get(*o)).sum()
    }

    fn read_fraction(&self) -> f64 {
        ["get", "seek"].iter().filter_map(|o| self.mix().get(*o)).sum()
    }
}

fn parse_mix(s: &str) -> BTreeMap<String, f64> {
    s.split_whitespace()
        .filter_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect()
}

/// `[section] name: old -> new`
fn parse_change(line: &str) -> Option<(String, Option<String>, Option<String>)> {
    let rest = line.strip_prefix('[')?;
    let (_, rest) = rest.split_once("] ")?;
    let (name, values) = rest.split_once(": ")?;
    let (old, new) = values.split_once(" -> ")?;
    let opt = |s: &str| (s != "<unset>").then(|| s.to_string());
    Some((name.to_string(), opt(old), opt(new)))
}

/// Changes collected by the rules, keyed by option name. Options named in a
/// degradation notice are reverted and otherwise left alone.
struct Plan<'a> {
    view: &'a PromptView,
    changes: Vec<(String, String)>,
    frozen: Vec<String>,
}

impl<'a> Plan<'a> {
    fn new(view: &'a PromptView) -> Self {
        let mut plan = Plan {
            view,
            changes: Vec::new(),
            frozen: Vec::new(),
        };
        for (name, old, new) in &view.reverts {
            if let (Some(old), Some(cur)) = (old, view.value(name)) {
                if new.as_deref() == Some(cur) {
                    plan.changes.push((name.clone(), old.clone()));
                }
            }
            plan.frozen.push(name.clone());
        }
        plan
    }

    fn set(&mut self, name: &str, value: String) {
        if self.frozen.iter().any(|f| f == name) || self.view.value(name) == Some(value.as_str()) {
            return;
        }
        match self.changes.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = value,
            None => self.changes.push((name.to_string(), value)),
        }
    }

    fn size_after(&self, name: &str) -> Option<u64> {
        let (_, v) = self.changes.iter().find(|(n, _)| n == name)?;
        parse_size(v).map(|(n, _)| n)
    }

    fn render(&self, catalog: &Catalog) -> String {
        if self.changes.is_empty() {
            return "The current configuration already follows the rules I apply; no changes.\n".into();
        }
        let mut by_section: Vec<(String, Vec<(&str, &str)>)> = Vec::new();
        for (name, value) in &self.changes {
            let section = self
                .view
                .options
                .iter()
                .find(|(_, n, _)| n == name)
                .map(|(s, _, _)| s.clone())
                .unwrap_or_else(|| section_for_absent(self.view, catalog, name));
            match by_section.iter_mut().find(|(s, _)| *s == section) {
                Some((_, list)) => list.push((name, value)),
                None => by_section.push((section, vec![(name, value)])),
            }
        }
        let mut out = String::from("Proposed changes:\n```ini\n");
        for (section, list) in by_section {
            let _ = writeln!(out, "[{section}]");
            for (name, value) in list {
                let _ = writeln!(out, "  {name}={value}");
            }
        }
        out.push_str("```\n");
        out
    }
}

/// Section header for an option that is not listed, such as a table option
/// absent from the file: the listed section of the same kind.
fn section_for_absent(view: &PromptView, catalog: &Catalog, name: &str) -> String {
    let kind = catalog.get(name).map(|m| m.section.clone()).unwrap_or_default();
    view.options
        .iter()
        .map(|(s, _, _)| s)
        .find(|s| crate::engine::section_kind(s) == kind)
        .cloned()
        .unwrap_or(kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(metrics: &str, mix: &str, options: &str) -> String {
        format!(
            "header\n\n## Workload\noperation mix: {mix}\n\n## Resources\ncpu_cores = 8\nmem_bytes = 8589934592\n\n\
             ## Latest result\n{metrics}\n\n## Current options\n```ini\n{options}```\n\n## Task\nx\n"
        )
    }

    #[test]
    fn stalls_raise_background_jobs() {
        let p = prompt(
            "throughput_ops_s = 100.0\nwrite_stall_micros = 5000",
            "put=1.000",
            "[DBOptions]\n  max_background_jobs=2\n",
        );
        let r = ScriptedAdvisor::default().respond(&p);
        assert!(r.contains("max_background_jobs=4"), "{r}");
    }

    #[test]
    fn no_stalls_leaves_jobs() {
        let p = prompt("write_stall_micros = 0", "put=1.000", "[DBOptions]\n  max_background_jobs=2\n");
        let r = ScriptedAdvisor::default().respond(&p);
        assert!(!r.contains("max_background_jobs"), "{r}");
    }

    #[test]
    fn notice_reverts_and_freezes() {
        let mut p = prompt(
            "write_stall_micros = 10",
            "put=1.000",
            "[DBOptions]\n  max_background_jobs=16\n",
        );
        p.push_str("\n## Notice\nThroughput dropped.\n  [DBOptions] max_background_jobs: 2 -> 16\n");
        let r = ScriptedAdvisor::default().respond(&p);
        assert!(r.contains("max_background_jobs=2"), "{r}");
    }

    #[test]
    fn fine_tune_alternates_direction() {
        let base = "header\n\n## Current options\n```ini\n[CFOptions \"default\"]\n  write_buffer_size=1000000\n```\n\n## Fine-tune\nstep = ";
        let a = ScriptedAdvisor::default().respond(&format!("{base}1\n"));
        let b = ScriptedAdvisor::default().respond(&format!("{base}2\n"));
        assert!(a.contains("write_buffer_size=1250000"), "{a}");
        assert!(b.contains("write_buffer_size=800000"), "{b}");
    }

    #[test]
    fn read_shift_raises_cache() {
        let p = "header\n\n## Workload shift\nprevious mix: put=1.000\nobserved mix: get=0.500 put=0.500\n\n\
                 ## Current options\n```ini\n[TableOptions/BlockBasedTable \"default\"]\n  block_cache_size=8388608\n```\n";
        let r = ScriptedAdvisor::default().respond(p);
        assert!(r.contains("block_cache_size=16777216"), "{r}");
    }
}
