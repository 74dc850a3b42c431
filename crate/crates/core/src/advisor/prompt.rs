//! Tuning prompt construction.
//!
//! Every prompt is plain text made of `## <title>` sections in a fixed order:
//! header line, Workload, Resources, Latest result, History, Notice, Current
//! options, Task, Output format. Sections without content are omitted, except
//! Output format which always closes the prompt. Metric lines are
//! `name = value` so that both people and the scripted advisor can read them.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::{BenchmarkResult, ResourceLimits};
use crate::characterize::WorkloadCharacterization;
use crate::engine::{Catalog, OptionChange, OptionsDocument, ResourceGroup};
use crate::trace::Op;
use crate::workload::WorkloadSpec;

/// Bumped whenever the wording of any template changes, since recorded
/// replay fixtures are keyed by the digest of the exact prompt text.
pub const PROMPT_TEMPLATE_VERSION: u32 = 1;
pub const DEFAULT_TOKEN_BUDGET: usize = 24_000;
/// Token counts are approximated as `ceil(chars / CHARS_PER_TOKEN)`.
pub const CHARS_PER_TOKEN: usize = 4;
pub const SUBSET_SLICE_OPTIONS: usize = 20;

pub const OUTPUT_FORMAT: &str = "## Output format\n\
Reply with exactly one fenced block listing only the options you change, \
each under its section header, one `name=value` per line:\n\
```ini\n\
[SectionName]\n  option_name=new_value\n\
```\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptStrategy {
    FullHistory,
    SubsetSplit,
    LatestOnly,
    ResourceGrouped,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::FullHistory,
        PromptStrategy::SubsetSplit,
        PromptStrategy::LatestOnly,
        PromptStrategy::ResourceGrouped,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStrategy::FullHistory => "full-history",
            PromptStrategy::SubsetSplit => "subset-split",
            PromptStrategy::LatestOnly => "latest-only",
            PromptStrategy::ResourceGrouped => "resource-grouped",
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptStrategy {
    type Err = String;

    /// Accepts `full-history`, `full_history`, `FullHistory` and so on.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        PromptStrategy::ALL
            .into_iter()
            .find(|p| p.as_str().replace('-', "") == norm)
            .ok_or_else(|| format!("unknown prompt strategy `{s}`"))
    }
}

/// Condensed benchmark outcome as shown to the advisor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub throughput_ops_s: f64,
    pub p99_us: f64,
    pub duration_s: f64,
    pub total_ops: u64,
    pub cpu_percent: Option<f64>,
    pub rss_bytes: Option<u64>,
    pub write_stall_micros: u64,
    pub pending_compaction_bytes: u64,
    pub l0_files: u64,
    pub block_cache_hit_ratio: f64,
    pub op_ratios: BTreeMap<Op, f64>,
}

impl ResultSummary {
    /// Engine counters come from the last snapshot; CPU is averaged and RSS
    /// is the peak over the timeline.
    pub fn from_result(r: &BenchmarkResult) -> Self {
        let cpu: Vec<f64> = r.timeline.iter().filter_map(|s| s.cpu_percent).collect();
        let engine = r.timeline.last().map(|s| s.engine.clone()).unwrap_or_default();
        let op_ratios = if r.total_ops == 0 {
            BTreeMap::new()
        } else {
            r.op_counts
                .iter()
                .map(|(op, n)| (*op, *n as f64 / r.total_ops as f64))
                .collect()
        };
        ResultSummary {
            throughput_ops_s: r.overall_throughput_ops_s,
            p99_us: r.overall_p99_us,
            duration_s: r.duration_s,
            total_ops: r.total_ops,
            cpu_percent: (!cpu.is_empty()).then(|| cpu.iter().sum::<f64>() / cpu.len() as f64),
            rss_bytes: r.timeline.iter().filter_map(|s| s.rss_bytes).max(),
            write_stall_micros: engine.write_stall_micros,
            pending_compaction_bytes: engine.pending_compaction_bytes,
            l0_files: engine.level_file_counts.first().copied().unwrap_or(0),
            block_cache_hit_ratio: engine.block_cache_hit_ratio,
            op_ratios,
        }
    }
}

/// One past iteration as listed in the History section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub index: usize,
    pub throughput_ops_s: f64,
    pub p99_us: f64,
    pub accepted: bool,
    pub changes: Vec<OptionChange>,
    pub notes: Vec<String>,
}

/// Workload description: the operation mix plus free-form detail lines
/// (fitted families, phases). Details are the second thing dropped when a
/// prompt exceeds its budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSummary {
    pub query_ratios: BTreeMap<Op, f64>,
    pub details: Vec<String>,
}

impl WorkloadSummary {
    pub fn from_characterization(c: &WorkloadCharacterization) -> Self {
        let fit = |label: &str, f: &crate::characterize::DistributionFit| {
            format!("{label}: {} (R² {:.3})", f.family, f.r_squared)
        };
        let mut details = vec![
            fit("key size", &c.key_size),
            fit("value size", &c.value_size),
            fit("key access by rank", &c.key_access),
            format!("distinct keys: {}", c.distinct_keys),
            format!("trace span: {:.1} s, {} records", c.duration_s, c.total_records),
        ];
        if let Some(p) = &c.periodic_hint {
            details.push(format!("periodic pattern: every {} s, {}", p.period_s, p.description));
        }
        WorkloadSummary {
            query_ratios: c.query_ratios.clone(),
            details,
        }
    }

    /// Mix weighted by phase duration, one detail line per phase.
    pub fn from_spec(spec: &WorkloadSpec) -> Self {
        let total: f64 = spec.phases.iter().map(|p| p.duration_s).sum();
        let mut query_ratios: BTreeMap<Op, f64> = BTreeMap::new();
        let mut details = Vec::new();
        for (i, p) in spec.phases.iter().enumerate() {
            let w = if total > 0.0 { p.duration_s / total } else { 0.0 };
            for (op, r) in &p.query_ratios {
                *query_ratios.entry(*op).or_default() += w * r;
            }
            let rate = p
                .target_ops_per_s
                .map_or("unthrottled".to_string(), |r| format!("{r} ops/s"));
            details.push(format!(
                "phase {i} ({}-{} s): {:?}, mix {}, key {}, value {}, access {}, key space {}, {} threads, {rate}",
                p.start_time_s,
                p.end_time_s(),
                p.workload_type,
                format_mix(&p.query_ratios),
                p.key_size,
                p.value_size,
                p.access_dist,
                p.key_space,
                p.client_threads,
            ));
        }
        WorkloadSummary { query_ratios, details }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub current_options: OptionsDocument,
    /// Chronological, oldest first.
    pub history: Vec<IterationSummary>,
    pub latest_result: Option<ResultSummary>,
    pub characterization: Option<WorkloadSummary>,
    pub limits: ResourceLimits,
    pub extra_directives: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    /// Which part of the strategy produced it, e.g. `subset 2/3`.
    pub label: String,
    pub text: String,
}

impl Prompt {
    pub fn digest(&self) -> String {
        prompt_digest(&self.text)
    }

    pub fn approx_tokens(&self) -> usize {
        approx_tokens(&self.text)
    }
}

pub fn prompt_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn approx_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(CHARS_PER_TOKEN)
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("prompt context incomplete: {0}")]
    ContextIncomplete(String),
    #[error("{label}: {tokens} tokens exceed the budget of {budget} even without history and workload details")]
    OverBudget { label: String, tokens: usize, budget: usize },
}

/// The options shown to the advisor: entries of `doc` that the catalog
/// knows, in document order. Options the catalog does not cover cannot be
/// changed by the advisor and are left out.
pub fn tunable_view(doc: &OptionsDocument, catalog: &Catalog) -> Vec<(String, String, String)> {
    doc.iter()
        .filter(|(section, name, _)| {
            catalog
                .get(name)
                .is_some_and(|m| m.section == crate::engine::section_kind(section))
        })
        .map(|(s, n, v)| (s.to_string(), n.to_string(), v.to_string()))
        .collect()
}

pub fn build_prompts(
    strategy: PromptStrategy,
    ctx: &PromptContext,
    catalog: &Catalog,
    token_budget: usize,
) -> Result<Vec<Prompt>, PromptError> {
    if !ctx.history.is_empty() && ctx.latest_result.is_none() {
        return Err(PromptError::ContextIncomplete(
            "history is present but the latest result is missing".into(),
        ));
    }
    if strategy != PromptStrategy::FullHistory && ctx.latest_result.is_none() {
        return Err(PromptError::ContextIncomplete(format!(
            "strategy {strategy} needs the latest result"
        )));
    }
    let view = tunable_view(&ctx.current_options, catalog);
    if view.is_empty() {
        return Err(PromptError::ContextIncomplete(
            "current options contain no tunable option".into(),
        ));
    }
    let header = format!(
        "You are an expert in tuning {} (prompt template v{PROMPT_TEMPLATE_VERSION}). \
         Propose option changes that raise throughput for the workload below \
         without exceeding the resource limits.\n",
        catalog.store
    );
    let mut prompts = Vec::new();
    match strategy {
        PromptStrategy::FullHistory => {
            let parts = Parts {
                header: &header,
                ctx,
                history: true,
                telemetry: None,
                options: &view,
                task: "Consider every option and all past iterations. Change as many \
                       options as needed."
                    .into(),
            };
            prompts.push(parts.render("full", token_budget)?);
        }
        PromptStrategy::LatestOnly => {
            let parts = Parts {
                header: &header,
                ctx,
                history: false,
                telemetry: None,
                options: &view,
                task: "Use the latest run to decide the next configuration.".into(),
            };
            prompts.push(parts.render("latest", token_budget)?);
        }
        PromptStrategy::SubsetSplit => {
            let k = view.len().div_ceil(SUBSET_SLICE_OPTIONS);
            for (i, slice) in view.chunks(SUBSET_SLICE_OPTIONS).enumerate() {
                let parts = Parts {
                    header: &header,
                    ctx,
                    history: false,
                    telemetry: None,
                    options: slice,
                    task: format!(
                        "This is part {} of {k} of the options file. Only change options \
                         listed under Current options.",
                        i + 1
                    ),
                };
                prompts.push(parts.render(&format!("subset {}/{k}", i + 1), token_budget)?);
            }
        }
        PromptStrategy::ResourceGrouped => {
            for group in ResourceGroup::ALL {
                let slice: Vec<_> = view
                    .iter()
                    .filter(|(_, name, _)| catalog.get(name).is_some_and(|m| m.resource_group == group))
                    .cloned()
                    .collect();
                if slice.is_empty() {
                    continue;
                }
                let parts = Parts {
                    header: &header,
                    ctx,
                    history: false,
                    telemetry: Some(group),
                    options: &slice,
                    task: format!(
                        "These are the {} options. Only change options listed under \
                         Current options, guided by the {} telemetry.",
                        group.as_str(),
                        group.as_str()
                    ),
                };
                prompts.push(parts.render(&format!("group {}", group.as_str()), token_budget)?);
            }
        }
    }
    Ok(prompts)
}

struct Parts<'a> {
    header: &'a str,
    ctx: &'a PromptContext,
    history: bool,
    telemetry: Option<ResourceGroup>,
    options: &'a [(String, String, String)],
    task: String,
}

impl Parts<'_> {
    /// Renders under the budget, dropping the oldest history entries first and
    /// then workload details. Options are never dropped.
    fn render(&self, label: &str, budget: usize) -> Result<Prompt, PromptError> {
        let mut skip_history = 0usize;
        let mut details = true;
        let history_len = if self.history { self.ctx.history.len() } else { 0 };
        loop {
            let text = self.text(skip_history, details);
            let tokens = approx_tokens(&text);
            if tokens <= budget {
                return Ok(Prompt {
                    label: label.to_string(),
                    text,
                });
            }
            if skip_history < history_len {
                skip_history += 1;
            } else if details {
                details = false;
            } else {
                return Err(PromptError::OverBudget {
                    label: label.to_string(),
                    tokens,
                    budget,
                });
            }
        }
    }

    fn text(&self, skip_history: usize, details: bool) -> String {
        let ctx = self.ctx;
        let mut t = String::new();
        t.push_str(self.header);
        if let Some(w) = &ctx.characterization {
            t.push_str("\n## Workload\n");
            let _ = writeln!(t, "operation mix: {}", format_mix(&w.query_ratios));
            if details {
                for d in &w.details {
                    let _ = writeln!(t, "{d}");
                }
            }
        }
        t.push_str("\n## Resources\n");
        let _ = writeln!(t, "cpu_cores = {}", ctx.limits.cpu_cores);
        let _ = writeln!(t, "mem_bytes = {}", ctx.limits.mem_bytes);
        if let Some(r) = &ctx.latest_result {
            t.push_str("\n## Latest result\n");
            write_metrics(&mut t, r, self.telemetry);
        }
        if self.history && !ctx.history.is_empty() {
            t.push_str("\n## History\n");
            if skip_history > 0 {
                let _ = writeln!(t, "({skip_history} older iterations omitted)");
            }
            for it in &ctx.history[skip_history..] {
                write_iteration(&mut t, it);
            }
        }
        if let Some(d) = &ctx.extra_directives {
            t.push_str("\n## Notice\n");
            t.push_str(d.trim_end());
            t.push('\n');
        }
        t.push_str("\n## Current options\n```ini\n");
        let mut current: Option<&str> = None;
        for (section, name, value) in self.options {
            if current != Some(section.as_str()) {
                let _ = writeln!(t, "[{section}]");
                current = Some(section);
            }
            let _ = writeln!(t, "  {name}={value}");
        }
        t.push_str("```\n");
        t.push_str("\n## Task\n");
        t.push_str(&self.task);
        t.push('\n');
        t.push('\n');
        t.push_str(OUTPUT_FORMAT);
        t
    }
}

/// `get=0.830 put=0.140`; ops in their canonical order.
pub fn format_mix(ratios: &BTreeMap<Op, f64>) -> String {
    let parts: Vec<String> = ratios
        .iter()
        .filter(|(_, r)| **r > 0.0)
        .map(|(op, r)| format!("{}={r:.3}", op.as_str().to_ascii_lowercase()))
        .collect();
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join(" ")
    }
}

fn write_metrics(t: &mut String, r: &ResultSummary, group: Option<ResourceGroup>) {
    let _ = writeln!(t, "throughput_ops_s = {:.1}", r.throughput_ops_s);
    let _ = writeln!(t, "p99_us = {:.1}", r.p99_us);
    let show = |g: ResourceGroup| group.is_none() || group == Some(g);
    if show(ResourceGroup::Cpu) {
        if let Some(c) = r.cpu_percent {
            let _ = writeln!(t, "cpu_percent = {c:.1}");
        }
    }
    if show(ResourceGroup::Memory) {
        if let Some(rss) = r.rss_bytes {
            let _ = writeln!(t, "rss_bytes = {rss}");
        }
        let _ = writeln!(t, "block_cache_hit_ratio = {:.4}", r.block_cache_hit_ratio);
    }
    if show(ResourceGroup::Storage) {
        let _ = writeln!(t, "write_stall_micros = {}", r.write_stall_micros);
        let _ = writeln!(t, "pending_compaction_bytes = {}", r.pending_compaction_bytes);
        let _ = writeln!(t, "l0_files = {}", r.l0_files);
    }
    if group.is_none() {
        let _ = writeln!(t, "duration_s = {}", r.duration_s);
        let _ = writeln!(t, "total_ops = {}", r.total_ops);
    }
    let _ = writeln!(t, "realized mix: {}", format_mix(&r.op_ratios));
}

fn write_iteration(t: &mut String, it: &IterationSummary) {
    let _ = write!(
        t,
        "iteration {}: throughput {:.1} ops/s, p99 {:.1} us, {}",
        it.index,
        it.throughput_ops_s,
        it.p99_us,
        if it.accepted { "accepted" } else { "rejected" }
    );
    if it.changes.is_empty() {
        t.push_str("; no changes\n");
    } else {
        t.push_str("; changes:\n");
        for c in &it.changes {
            let _ = writeln!(t, "  {c}");
        }
    }
    for n in &it.notes {
        let _ = writeln!(t, "  note: {n}");
    }
}

/// Notice text for an iteration stopped by the throughput flagger.
pub fn degradation_notice(dropped_to: f64, baseline: f64, changes: &[OptionChange]) -> String {
    let mut s = format!(
        "Throughput dropped to {dropped_to:.1} ops/s against a baseline of {baseline:.1} ops/s \
         and the run was stopped. These changes led to the drop; revise or revert them:\n"
    );
    for c in changes {
        let _ = writeln!(s, "  {c}");
    }
    s
}
