//! Drift detection and runtime adjustment of mutable options.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::advisor::{
    extract_options, format_mix, prompt_digest, Advisor, AdvisorError, OUTPUT_FORMAT, PROMPT_TEMPLATE_VERSION,
};
use crate::bench::{BenchObserver, Control, ResourceLimits, TelemetrySnapshot};
use crate::characterize::WorkloadCharacterization;
use crate::engine::{Catalog, Engine, OptionChange, OptionsDocument, Violation, ViolationAction};
use crate::trace::Op;
use crate::workload::WorkloadPhase;

pub const DEFAULT_TICK_PERIOD_S: f64 = 90.0;
pub const DEFAULT_RATIO_SHIFT_THRESHOLD: f64 = 0.15;
pub const DEFAULT_SIZE_SHIFT_THRESHOLD_FRAC: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealtimeTunerConfig {
    pub tick_period_s: f64,
    pub ratio_shift_threshold: f64,
    pub size_shift_threshold_frac: f64,
}

impl Default for RealtimeTunerConfig {
    fn default() -> Self {
        RealtimeTunerConfig {
            tick_period_s: DEFAULT_TICK_PERIOD_S,
            ratio_shift_threshold: DEFAULT_RATIO_SHIFT_THRESHOLD,
            size_shift_threshold_frac: DEFAULT_SIZE_SHIFT_THRESHOLD_FRAC,
        }
    }
}

/// What the workload is believed to look like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftBaseline {
    pub query_ratios: BTreeMap<Op, f64>,
    pub mean_value_size: Option<f64>,
}

impl From<&WorkloadCharacterization> for DriftBaseline {
    fn from(c: &WorkloadCharacterization) -> Self {
        DriftBaseline {
            query_ratios: c.query_ratios.clone(),
            mean_value_size: c.value_size.family.mean().filter(|m| m.is_finite()),
        }
    }
}

impl From<&WorkloadPhase> for DriftBaseline {
    fn from(p: &WorkloadPhase) -> Self {
        DriftBaseline {
            query_ratios: p.query_ratios.clone(),
            mean_value_size: p.value_size.mean().filter(|m| m.is_finite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEvent {
    pub ts_s: f64,
    pub observed_ratios: BTreeMap<Op, f64>,
    pub baseline_ratios: BTreeMap<Op, f64>,
    pub observed_mean_value_size: Option<f64>,
    pub baseline_mean_value_size: Option<f64>,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RealtimeEvent {
    Shift(ShiftEvent),
    Underutilized { ts_s: f64, cpu_percent: f64, cpu_cores: u32 },
}

impl RealtimeEvent {
    pub fn ts_s(&self) -> f64 {
        match self {
            RealtimeEvent::Shift(s) => s.ts_s,
            RealtimeEvent::Underutilized { ts_s, .. } => *ts_s,
        }
    }
}

/// Op fractions and mean value size over the most recent half of `recent`
/// (at least one snapshot), weighted by each window's op count. Using the
/// trailing half keeps a shift in the middle of a tick from being diluted by
/// the windows before it.
pub fn observed_mix(recent: &[TelemetrySnapshot]) -> (BTreeMap<Op, f64>, Option<f64>) {
    let tail = &recent[recent.len() / 2..];
    let mut counts: BTreeMap<Op, f64> = BTreeMap::new();
    let mut total = 0.0;
    let (mut size_sum, mut size_weight) = (0.0, 0.0);
    for s in tail {
        let n = s.window_ops as f64;
        total += n;
        for (op, r) in &s.realized_op_ratios {
            *counts.entry(*op).or_default() += r * n;
        }
        if let Some(m) = s.mean_value_size {
            let w = n * s.realized_op_ratios.get(&Op::Put).copied().unwrap_or(0.0);
            size_sum += m * w;
            size_weight += w;
        }
    }
    let ratios = if total > 0.0 {
        counts.into_iter().map(|(op, c)| (op, c / total)).collect()
    } else {
        BTreeMap::new()
    };
    let size = (size_weight > 0.0).then(|| size_sum / size_weight);
    (ratios, size)
}

pub fn drift_detect(
    recent: &[TelemetrySnapshot],
    baseline: &DriftBaseline,
    cfg: &RealtimeTunerConfig,
) -> Option<ShiftEvent> {
    let last = recent.last()?;
    let (observed, size) = observed_mix(recent);
    if observed.is_empty() {
        return None;
    }
    let mut reasons = Vec::new();
    for op in Op::ALL {
        let o = observed.get(&op).copied().unwrap_or(0.0);
        let b = baseline.query_ratios.get(&op).copied().unwrap_or(0.0);
        if (o - b).abs() > cfg.ratio_shift_threshold {
            reasons.push(format!("{} fraction {b:.3} -> {o:.3}", op.as_str().to_ascii_lowercase()));
        }
    }
    if let (Some(o), Some(b)) = (size, baseline.mean_value_size) {
        if b > 0.0 && ((o - b) / b).abs() > cfg.size_shift_threshold_frac {
            reasons.push(format!("mean value size {b:.1} -> {o:.1} bytes"));
        }
    }
    if reasons.is_empty() {
        return None;
    }
    Some(ShiftEvent {
        ts_s: last.ts_s,
        observed_ratios: observed,
        baseline_ratios: baseline.query_ratios.clone(),
        observed_mean_value_size: size,
        baseline_mean_value_size: baseline.mean_value_size,
        reasons,
    })
}

/// Mean CPU over `recent` below `frac` of the available cores.
pub fn detect_underutilization(
    recent: &[TelemetrySnapshot],
    limits: &ResourceLimits,
    frac: f64,
) -> Option<RealtimeEvent> {
    let cpu: Vec<f64> = recent.iter().filter_map(|s| s.cpu_percent).collect();
    if cpu.is_empty() || limits.cpu_cores == 0 {
        return None;
    }
    let mean = cpu.iter().sum::<f64>() / cpu.len() as f64;
    (mean < frac * 100.0 * limits.cpu_cores as f64).then(|| RealtimeEvent::Underutilized {
        ts_s: recent.last().map_or(0.0, |s| s.ts_s),
        cpu_percent: mean,
        cpu_cores: limits.cpu_cores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealtimeApplied {
    pub ts_s: f64,
    pub event: RealtimeEvent,
    pub prompt_digest: String,
    pub changes: Vec<OptionChange>,
    pub violations: Vec<Violation>,
}

/// Every runtime-mutable catalog option with its effective value in `doc`.
pub fn mutable_view(doc: &OptionsDocument, catalog: &Catalog) -> OptionsDocument {
    let mut out = OptionsDocument::new();
    for meta in catalog.entries().iter().filter(|m| m.mutable_at_runtime) {
        let section = catalog.section_name_in(doc, meta);
        let value = catalog.value_in(doc, &meta.name).unwrap_or(&meta.default);
        out.set(&section, &meta.name, value);
    }
    out
}

pub fn realtime_prompt(
    event: &RealtimeEvent,
    current: &OptionsDocument,
    latest: Option<&TelemetrySnapshot>,
    limits: &ResourceLimits,
    catalog: &Catalog,
) -> String {
    let mut t = format!(
        "You are an expert in tuning {} (prompt template v{PROMPT_TEMPLATE_VERSION}). \
         The running workload changed. Propose small changes to runtime-mutable options only; \
         the store stays online.\n",
        catalog.store
    );
    t.push_str("\n## Resources\n");
    let _ = writeln!(t, "cpu_cores = {}", limits.cpu_cores);
    let _ = writeln!(t, "mem_bytes = {}", limits.mem_bytes);
    if let Some(s) = latest {
        t.push_str("\n## Latest telemetry\n");
        let _ = writeln!(t, "throughput_ops_s = {:.1}", s.throughput_ops_s);
        let _ = writeln!(t, "p99_us = {:.1}", s.p99_latency_us);
        if let Some(c) = s.cpu_percent {
            let _ = writeln!(t, "cpu_percent = {c:.1}");
        }
        let _ = writeln!(t, "write_stall_micros = {}", s.engine.write_stall_micros);
        let _ = writeln!(t, "block_cache_hit_ratio = {:.4}", s.engine.block_cache_hit_ratio);
        let _ = writeln!(t, "realized mix: {}", format_mix(&s.realized_op_ratios));
    }
    t.push_str("\n## Workload shift\n");
    match event {
        RealtimeEvent::Shift(e) => {
            let _ = writeln!(t, "previous mix: {}", format_mix(&e.baseline_ratios));
            let _ = writeln!(t, "observed mix: {}", format_mix(&e.observed_ratios));
            if let Some(b) = e.baseline_mean_value_size {
                let _ = writeln!(t, "previous mean value size: {b:.1}");
            }
            if let Some(o) = e.observed_mean_value_size {
                let _ = writeln!(t, "observed mean value size: {o:.1}");
            }
            for r in &e.reasons {
                let _ = writeln!(t, "reason: {r}");
            }
        }
        RealtimeEvent::Underutilized { cpu_percent, cpu_cores, .. } => {
            let _ = writeln!(t, "cpu underutilized: {cpu_percent:.1}% of {cpu_cores} cores");
        }
    }
    t.push_str("\n## Current options\n```ini\n");
    t.push_str(&mutable_view(current, catalog).emit());
    t.push_str("```\n\n## Task\nOnly change options listed under Current options.\n\n");
    t.push_str(OUTPUT_FORMAT);
    t
}

/// One real-time adjustment: prompt, extract, keep runtime-mutable options,
/// apply them to the running engine. `current` is updated with what the
/// engine accepted.
pub fn realtime_tick(
    event: &RealtimeEvent,
    advisor: &mut dyn Advisor,
    engine: &dyn Engine,
    catalog: &Catalog,
    current: &mut OptionsDocument,
    latest: Option<&TelemetrySnapshot>,
    limits: &ResourceLimits,
) -> Result<RealtimeApplied, AdvisorError> {
    let prompt = realtime_prompt(event, current, latest, limits, catalog);
    let raw = advisor.complete(&prompt)?;
    let view = mutable_view(current, catalog);
    let response = extract_options(&raw, &view, catalog);
    let mut violations = response.violations;
    let mut wanted: BTreeMap<String, String> = BTreeMap::new();
    for (section, opts) in &response.extracted_delta {
        for (name, value) in opts {
            if catalog.is_mutable(name) {
                wanted.insert(name.clone(), value.clone());
            } else {
                violations.push(Violation {
                    section: section.clone(),
                    name: name.clone(),
                    value: value.clone(),
                    action: ViolationAction::RemovedInvalid {
                        reason: "not mutable at runtime".into(),
                    },
                });
            }
        }
    }
    let mut changes = Vec::new();
    if !wanted.is_empty() {
        match engine.set_mutable_options(&wanted) {
            Ok(applied) => {
                for (name, value) in applied {
                    let Some(meta) = catalog.get(&name) else { continue };
                    let section = catalog.section_name_in(current, meta);
                    let old = catalog.value_in(current, &name).map(str::to_string);
                    current.set(&section, &name, &value);
                    changes.push(OptionChange {
                        section,
                        name,
                        old,
                        new: Some(value),
                    });
                }
            }
            Err(e) => warn!("engine refused runtime options: {e}"),
        }
    }
    let ts_s = event.ts_s();
    for c in &changes {
        info!("t={ts_s}s applied {c}");
    }
    Ok(RealtimeApplied {
        ts_s,
        event: event.clone(),
        prompt_digest: prompt_digest(&prompt),
        changes,
        violations,
    })
}

/// Benchmark observer that checks for drift every `tick_period_s` seconds
/// of run time and adjusts mutable options when it finds some. After a
/// shift, the observed workload becomes the new reference.
pub struct RealtimeTuner<'a> {
    pub cfg: RealtimeTunerConfig,
    pub reference: DriftBaseline,
    advisor: &'a mut dyn Advisor,
    catalog: &'a Catalog,
    pub current: OptionsDocument,
    pub limits: ResourceLimits,
    /// CPU fraction below which an idle tick is reported; `None` disables it.
    pub underutilization_frac: Option<f64>,
    pending: Vec<TelemetrySnapshot>,
    next_tick_s: f64,
    pub ticks: usize,
    pub events: Vec<RealtimeEvent>,
    pub applied: Vec<RealtimeApplied>,
    pub skipped: Vec<String>,
}

impl<'a> RealtimeTuner<'a> {
    pub fn new(
        cfg: RealtimeTunerConfig,
        reference: DriftBaseline,
        advisor: &'a mut dyn Advisor,
        catalog: &'a Catalog,
        current: OptionsDocument,
        limits: ResourceLimits,
    ) -> Self {
        RealtimeTuner {
            next_tick_s: cfg.tick_period_s,
            cfg,
            reference,
            advisor,
            catalog,
            current,
            limits,
            underutilization_frac: None,
            pending: Vec::new(),
            ticks: 0,
            events: Vec::new(),
            applied: Vec::new(),
            skipped: Vec::new(),
        }
    }

    fn tick(&mut self, engine: &dyn Engine) {
        self.ticks += 1;
        let recent = std::mem::take(&mut self.pending);
        let event = match drift_detect(&recent, &self.reference, &self.cfg) {
            Some(shift) => {
                self.reference = DriftBaseline {
                    query_ratios: shift.observed_ratios.clone(),
                    mean_value_size: shift.observed_mean_value_size.or(self.reference.mean_value_size),
                };
                Some(RealtimeEvent::Shift(shift))
            }
            None => self
                .underutilization_frac
                .and_then(|f| detect_underutilization(&recent, &self.limits, f)),
        };
        let Some(event) = event else { return };
        self.events.push(event.clone());
        match realtime_tick(
            &event,
            self.advisor,
            engine,
            self.catalog,
            &mut self.current,
            recent.last(),
            &self.limits,
        ) {
            Ok(applied) => self.applied.push(applied),
            Err(e) => {
                warn!("real-time tick at t={}s skipped: {e}", event.ts_s());
                self.skipped.push(e.to_string());
            }
        }
    }
}

impl BenchObserver for RealtimeTuner<'_> {
    fn on_snapshot(&mut self, snap: &TelemetrySnapshot, engine: &dyn Engine) -> Control {
        self.pending.push(snap.clone());
        if snap.ts_s + 1e-9 >= self.next_tick_s {
            self.tick(engine);
            while self.next_tick_s <= snap.ts_s + 1e-9 {
                self.next_tick_s += self.cfg.tick_period_s;
            }
        }
        Control::Continue
    }
}
