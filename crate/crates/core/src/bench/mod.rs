//! Benchmark execution and telemetry.
//!
//! With the simulated engine the run is a discrete-event simulation in
//! virtual time: every client keeps its own clock, the client with the
//! earliest next issue time runs next, and the engine returns modeled
//! latencies. The result is bit-identical for a given spec, seed and options.
//! Other engines run on real threads against the wall clock.
//!
//! Operations are attributed to the sampling window containing their issue
//! time. Merge operations are issued as puts.

pub mod histogram;
pub mod procfs;
mod threaded;
mod virtual_time;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{Engine, EngineError, EngineStats, OptionsDocument};
use crate::trace::Op;
use crate::workload::{validate_spec, SpecViolation, WorkloadError, WorkloadSpec};

pub use histogram::{percentile, AtomicHistogram, HistogramError, LatencyHistogram};

pub const DEFAULT_SAMPLER_PERIOD_S: f64 = 1.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid workload spec: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidSpec(Vec<SpecViolation>),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("engine failure: {message}")]
    EngineFailure {
        message: String,
        partial: Box<BenchmarkResult>,
    },
    #[error("sampler period must be positive")]
    InvalidPeriod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub cpu_cores: u32,
    pub mem_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    /// Seconds from benchmark start to the end of the window.
    pub ts_s: f64,
    pub window_s: f64,
    pub window_ops: u64,
    pub throughput_ops_s: f64,
    pub p99_latency_us: f64,
    pub cpu_percent: Option<f64>,
    pub rss_bytes: Option<u64>,
    pub engine: EngineStats,
    pub realized_op_ratios: BTreeMap<Op, f64>,
    /// Mean bytes written per value-carrying op in the window.
    pub mean_value_size: Option<f64>,
    pub phase: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub spec_name: String,
    pub options_digest: String,
    pub timeline: Vec<TelemetrySnapshot>,
    pub overall_throughput_ops_s: f64,
    pub overall_p99_us: f64,
    pub duration_s: f64,
    pub total_ops: u64,
    pub op_counts: BTreeMap<Op, u64>,
    pub limits: ResourceLimits,
    /// Why the run stopped early, if it did.
    pub halted: Option<String>,
}

impl BenchmarkResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    /// Timeline as CSV: `ts,throughput,p99_us,cpu,rss`; unavailable cpu/rss
    /// are left empty.
    pub fn timeline_csv(&self) -> String {
        let mut out = String::from("ts,throughput,p99_us,cpu,rss\n");
        for s in &self.timeline {
            let cpu = s.cpu_percent.map(|c| c.to_string()).unwrap_or_default();
            let rss = s.rss_bytes.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", s.ts_s, s.throughput_ops_s, s.p99_latency_us, cpu, rss);
        }
        out
    }
}

/// Observer verdict after each sampling window.
#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    Continue,
    Halt(String),
}

/// Receives every snapshot while the benchmark runs; may adjust the engine
/// (runtime options) or stop the run.
pub trait BenchObserver {
    fn on_snapshot(&mut self, snapshot: &TelemetrySnapshot, engine: &dyn Engine) -> Control;
}

pub struct NoObserver;

impl BenchObserver for NoObserver {
    fn on_snapshot(&mut self, _: &TelemetrySnapshot, _: &dyn Engine) -> Control {
        Control::Continue
    }
}

impl<F: FnMut(&TelemetrySnapshot, &dyn Engine) -> Control> BenchObserver for F {
    fn on_snapshot(&mut self, snapshot: &TelemetrySnapshot, engine: &dyn Engine) -> Control {
        self(snapshot, engine)
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sampler_period_s: f64,
    pub limits: ResourceLimits,
    pub options_digest: String,
    /// Load every key of the first reading phase before measuring.
    pub prefill: bool,
    pub stop: Option<Arc<AtomicBool>>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sampler_period_s: DEFAULT_SAMPLER_PERIOD_S,
            limits: ResourceLimits::default(),
            options_digest: String::new(),
            prefill: true,
            stop: None,
        }
    }
}

impl BenchConfig {
    pub fn for_options(doc: &OptionsDocument) -> Self {
        BenchConfig {
            options_digest: options_digest(doc),
            ..Self::default()
        }
    }
}

/// SHA-256 of the emitted options file.
pub fn options_digest(doc: &OptionsDocument) -> String {
    hex::encode(Sha256::digest(doc.emit().as_bytes()))
}

/// Paces one client: issue no earlier than one interval after the previous
/// issue, with no credit carried over from idle time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenBucket {
    interval_us: f64,
    next_us: f64,
}

impl TokenBucket {
    pub fn new(rate_ops_s: f64, start_us: f64) -> Self {
        TokenBucket {
            interval_us: 1e6 / rate_ops_s,
            next_us: start_us,
        }
    }

    pub fn interval_us(&self) -> f64 {
        self.interval_us
    }

    /// Issue time for a client ready at `ready_us`; consumes the token.
    pub fn take(&mut self, ready_us: f64) -> f64 {
        let issue = ready_us.max(self.next_us);
        self.next_us = issue + self.interval_us;
        issue
    }
}

/// Running totals of one sampling window.
#[derive(Debug, Clone, Default)]
pub(crate) struct WindowAcc {
    pub ops: BTreeMap<Op, u64>,
    pub hist: LatencyHistogram,
    pub value_bytes: u64,
    pub value_ops: u64,
}

impl WindowAcc {
    pub fn record(&mut self, op: Op, latency_us: f64, value_len: u64) {
        *self.ops.entry(op).or_insert(0) += 1;
        self.hist.record(latency_us);
        if op.writes_value() {
            self.value_bytes += value_len;
            self.value_ops += 1;
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn snapshot(
        &self,
        ts_s: f64,
        window_s: f64,
        phase: usize,
        engine: EngineStats,
        cpu_percent: Option<f64>,
        rss_bytes: Option<u64>,
    ) -> TelemetrySnapshot {
        let n: u64 = self.ops.values().sum();
        let realized = if n == 0 {
            BTreeMap::new()
        } else {
            self.ops.iter().map(|(op, c)| (*op, *c as f64 / n as f64)).collect()
        };
        TelemetrySnapshot {
            ts_s,
            window_s,
            window_ops: n,
            throughput_ops_s: if window_s > 0.0 { n as f64 / window_s } else { 0.0 },
            p99_latency_us: self.hist.percentile(99.0).unwrap_or(0.0),
            cpu_percent,
            rss_bytes,
            engine,
            realized_op_ratios: realized,
            mean_value_size: (self.value_ops > 0).then(|| self.value_bytes as f64 / self.value_ops as f64),
            phase,
        }
    }
}

pub(crate) fn finish_result(
    spec: &WorkloadSpec,
    cfg: &BenchConfig,
    timeline: Vec<TelemetrySnapshot>,
    overall: &LatencyHistogram,
    op_counts: BTreeMap<Op, u64>,
    duration_s: f64,
    halted: Option<String>,
) -> BenchmarkResult {
    let total_ops: u64 = op_counts.values().sum();
    BenchmarkResult {
        spec_name: spec.name.clone(),
        options_digest: cfg.options_digest.clone(),
        timeline,
        overall_throughput_ops_s: if duration_s > 0.0 { total_ops as f64 / duration_s } else { 0.0 },
        overall_p99_us: overall.percentile(99.0).unwrap_or(0.0),
        duration_s,
        total_ops,
        op_counts,
        limits: cfg.limits,
        halted,
    }
}

pub(crate) fn clamp_cpu(percent: f64, cores: u32) -> f64 {
    percent.clamp(0.0, 100.0 * cores.max(1) as f64)
}

/// Index of the first phase that reads, whose key space is loaded before
/// measuring.
pub(crate) fn prefill_phase(spec: &WorkloadSpec) -> Option<usize> {
    spec.phases.iter().position(|p| p.reads())
}

/// Runs every phase of `spec` against `engine`, sampling telemetry every
/// `cfg.sampler_period_s` and passing each snapshot to `observer`.
pub fn run_benchmark(
    spec: &WorkloadSpec,
    engine: &dyn Engine,
    cfg: &BenchConfig,
    observer: &mut dyn BenchObserver,
) -> Result<BenchmarkResult, BenchError> {
    let violations = validate_spec(spec);
    if !violations.is_empty() {
        return Err(BenchError::InvalidSpec(violations));
    }
    if !(cfg.sampler_period_s > 0.0 && cfg.sampler_period_s.is_finite()) {
        return Err(BenchError::InvalidPeriod);
    }
    match engine.as_simulated() {
        Some(sim) => virtual_time::run(spec, sim, engine, cfg, observer),
        None => threaded::run(spec, engine, cfg, observer),
    }
}

pub(crate) fn engine_failure(
    e: EngineError,
    partial: BenchmarkResult,
) -> BenchError {
    let mut partial = partial;
    partial.halted = Some(format!("engine failure: {e}"));
    BenchError::EngineFailure {
        message: e.to_string(),
        partial: Box::new(partial),
    }
}
