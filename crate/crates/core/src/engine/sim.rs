//! Deterministic analytic LSM engine.
//!
//! Data lives in an in-memory ordered map so reads return what was written.
//! Time is virtual: each operation is issued at a caller-supplied instant and
//! the model returns its latency. The model tracks the active memtable,
//! immutable memtables waiting for flush, level-0 files, and bytes in the
//! lower levels.
//!
//! Background work is measured in work units (bytes of I/O plus a per-byte
//! compression CPU charge) and drains at `B(j) = JOB_BANDWIDTH * j / (1 + j²/64)`
//! units per µs for `j` background jobs, which rises linearly, peaks at 8 jobs
//! and falls off beyond as jobs contend. Flushes run before compactions. A
//! level-0 compaction starts once `level0_file_num_compaction_trigger` files
//! exist and costs `1 + 0.2 * max_bytes_for_level_multiplier` units per
//! compressed byte.
//!
//! Writes pay `PUT_BASE_US + PUT_PER_BYTE_US * bytes` scaled by foreground
//! contention `1 + 0.01 j`, plus stalls:
//! - all `max_write_buffer_number` memtables full: wait for the head flush;
//! - level-0 files ≥ stop trigger or pending bytes ≥ hard limit: wait for the
//!   running compaction (skipped when auto compactions are disabled);
//! - level-0 files ≥ slowdown trigger or pending bytes ≥ soft limit: writes
//!   are paced globally at `delayed_write_rate`.
//!
//! Reads pay a base cost, a filter or index probe per sorted run, and block
//! reads that hit the block cache with probability
//! `min(1, block_cache_size / working_set)`.

use std::collections::{BTreeMap, HashMap};
use std::ops::Bound;
use std::sync::{Arc, Mutex, MutexGuard};

use super::catalog::{parse_bool, parse_size, value_is_valid, Catalog};
use super::{Engine, EngineError, EngineKind, EngineStats, OptionsDocument};
use crate::trace::{Op, TraceRecord};

pub const PUT_BASE_US: f64 = 2.0;
pub const PUT_PER_BYTE_US: f64 = 0.002;
pub const GET_BASE_US: f64 = 1.5;
pub const PROBE_US: f64 = 0.3;
pub const BLOCK_HIT_US: f64 = 0.8;
pub const BLOCK_MISS_US: f64 = 80.0;
pub const SEEK_BASE_US: f64 = 3.0;
pub const SEEK_PER_ENTRY_US: f64 = 0.2;
/// Work units per µs one uncontended background job drains (48 MiB/s).
pub const JOB_BANDWIDTH: f64 = 48.0 * 1024.0 * 1024.0 / 1e6;
pub const JOB_CONTENTION: f64 = 1.0 / 64.0;
pub const FG_CONTENTION: f64 = 0.01;
pub const BLOOM_FALSE_POSITIVE: f64 = 0.01;
pub const BASE_RSS_BYTES: u64 = 32 << 20;
const DEFAULT_CACHE_BYTES: f64 = 8.0 * 1024.0 * 1024.0;

#[derive(Debug, Clone, PartialEq)]
struct SimConfig {
    write_buffer_size: f64,
    max_write_buffer_number: u32,
    l0_trigger: u32,
    l0_slowdown: u32,
    l0_stop: u32,
    jobs: u32,
    cache_bytes: f64,
    bloom: bool,
    compression_ratio: f64,
    compression_cpu: f64,
    level_multiplier: f64,
    level_base: f64,
    target_file_size: f64,
    delayed_write_rate: f64,
    disable_auto_compactions: bool,
    soft_pending: f64,
    hard_pending: f64,
    block_size: f64,
}

fn compression_model(name: &str) -> (f64, f64) {
    match name {
        "kNoCompression" => (1.0, 0.0),
        "kSnappyCompression" => (0.6, 0.05),
        "kLZ4Compression" => (0.62, 0.04),
        "kLZ4HCCompression" => (0.55, 0.25),
        "kZlibCompression" => (0.5, 0.4),
        "kBZip2Compression" => (0.45, 0.8),
        "kXpressCompression" => (0.55, 0.2),
        "kZSTD" => (0.45, 0.3),
        _ => (0.6, 0.05),
    }
}

impl SimConfig {
    fn from_doc(doc: &OptionsDocument, catalog: &Catalog) -> Result<Self, EngineError> {
        let raw = |name: &str| -> String {
            catalog
                .value_in(doc, name)
                .map(str::to_string)
                .unwrap_or_default()
        };
        let bad = |name: &str, value: String| EngineError::InvalidValue {
            name: name.to_string(),
            value,
        };
        let int = |name: &str| -> Result<i64, EngineError> {
            let v = raw(name);
            v.parse().map_err(|_| bad(name, v))
        };
        let size = |name: &str| -> Result<f64, EngineError> {
            let v = raw(name);
            parse_size(&v).map(|(n, _)| n as f64).ok_or_else(|| bad(name, v))
        };
        let float = |name: &str| -> Result<f64, EngineError> {
            let v = raw(name);
            v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| bad(name, v))
        };
        let boolean = |name: &str| -> Result<bool, EngineError> {
            let v = raw(name);
            parse_bool(&v).ok_or_else(|| bad(name, v))
        };

        let mut jobs = int("max_background_jobs")?.max(1);
        let (compactions, flushes) = (int("max_background_compactions")?, int("max_background_flushes")?);
        if compactions > 0 && flushes > 0 {
            jobs = compactions + flushes;
        }
        let cache_bytes = match doc.get_in_kind("TableOptions", "block_cache_size") {
            Some(_) => size("block_cache_size")?,
            None => DEFAULT_CACHE_BYTES,
        };
        let (ratio, cpu) = compression_model(&raw("compression"));
        let bottommost = raw("bottommost_compression");
        let (ratio, cpu) = if bottommost != "kDisableCompressionOption" {
            let (r2, c2) = compression_model(&bottommost);
            ((ratio + r2) / 2.0, (cpu + c2) / 2.0)
        } else {
            (ratio, cpu)
        };
        let cfg = SimConfig {
            write_buffer_size: size("write_buffer_size")?.max(64.0 * 1024.0),
            max_write_buffer_number: int("max_write_buffer_number")?.clamp(2, 64) as u32,
            l0_trigger: int("level0_file_num_compaction_trigger")?.max(1) as u32,
            l0_slowdown: int("level0_slowdown_writes_trigger")?.max(1) as u32,
            l0_stop: int("level0_stop_writes_trigger")?.max(1) as u32,
            jobs: jobs.min(256) as u32,
            cache_bytes,
            bloom: raw("filter_policy").to_ascii_lowercase().contains("bloom"),
            compression_ratio: ratio,
            compression_cpu: cpu,
            level_multiplier: float("max_bytes_for_level_multiplier")?.max(1.01),
            level_base: size("max_bytes_for_level_base")?.max(1.0),
            target_file_size: size("target_file_size_base")?.max(1.0),
            delayed_write_rate: size("delayed_write_rate")?.max(1.0) / 1e6,
            disable_auto_compactions: boolean("disable_auto_compactions")?,
            soft_pending: size("soft_pending_compaction_bytes_limit")?,
            hard_pending: size("hard_pending_compaction_bytes_limit")?,
            block_size: size("block_size")?.max(512.0),
        };
        Ok(cfg)
    }

    fn bandwidth(&self) -> f64 {
        let j = self.jobs as f64;
        JOB_BANDWIDTH * j / (1.0 + JOB_CONTENTION * j * j)
    }

    fn flush_cost(&self) -> f64 {
        self.write_buffer_size * (self.compression_ratio + self.compression_cpu)
    }

    fn compaction_cost_per_file(&self) -> f64 {
        self.write_buffer_size
            * self.compression_ratio
            * (1.0 + 0.2 * self.level_multiplier)
            * (1.0 + self.compression_cpu)
    }

    fn fg_factor(&self) -> f64 {
        1.0 + FG_CONTENTION * self.jobs as f64
    }
}

#[derive(Debug, Clone)]
enum Stored {
    Bytes(Box<[u8]>),
    Repeat { byte: u8, len: usize },
}

impl Stored {
    fn new(value: &[u8]) -> Self {
        match value.first() {
            Some(&b) if value.len() > 16 && value.iter().all(|&x| x == b) => Stored::Repeat {
                byte: b,
                len: value.len(),
            },
            _ => Stored::Bytes(value.into()),
        }
    }

    fn len(&self) -> usize {
        match self {
            Stored::Bytes(b) => b.len(),
            Stored::Repeat { len, .. } => *len,
        }
    }

    fn to_vec(&self) -> Vec<u8> {
        match self {
            Stored::Bytes(b) => b.to_vec(),
            Stored::Repeat { byte, len } => vec![*byte; *len],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Fault {
    from_us: f64,
    factor: f64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct ModeledUsage {
    /// Busy time of foreground and background work, in µs of one core.
    pub cpu_busy_us: f64,
    pub rss_bytes: u64,
}

struct SimState {
    cfg: SimConfig,
    doc: OptionsDocument,
    data: BTreeMap<Vec<u8>, Stored>,
    live_bytes: f64,
    now_us: f64,
    /// Internal clock for callers that do not supply issue times.
    serial_clock_us: f64,
    active_bytes: f64,
    imm_count: u32,
    flush_progress: f64,
    l0_files: u32,
    compacting: Option<u32>,
    compaction_progress: f64,
    lower_bytes: f64,
    write_slot_us: f64,
    ops: BTreeMap<Op, u64>,
    stall_us: f64,
    cache_hits: f64,
    cache_lookups: f64,
    fg_busy_us: f64,
    bg_busy_us: f64,
    fault: Option<Fault>,
    recording: Option<Vec<TraceRecord>>,
    closed: bool,
}

/// Analytic engine; see the module documentation for the cost model.
pub struct SimulatedEngine {
    catalog: Arc<Catalog>,
    state: Mutex<SimState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimOp<'a> {
    Put(&'a [u8], &'a [u8]),
    Get(&'a [u8]),
    Delete(&'a [u8]),
    Seek(&'a [u8], usize),
}

impl SimOp<'_> {
    pub fn op(&self) -> Op {
        match self {
            SimOp::Put(..) => Op::Put,
            SimOp::Get(..) => Op::Get,
            SimOp::Delete(..) => Op::Delete,
            SimOp::Seek(..) => Op::Seek,
        }
    }
}

impl SimulatedEngine {
    pub fn open(doc: &OptionsDocument, catalog: Arc<Catalog>) -> Result<Self, EngineError> {
        let cfg = SimConfig::from_doc(doc, &catalog)?;
        Ok(SimulatedEngine {
            catalog,
            state: Mutex::new(SimState {
                cfg,
                doc: doc.clone(),
                data: BTreeMap::new(),
                live_bytes: 0.0,
                now_us: 0.0,
                serial_clock_us: 0.0,
                active_bytes: 0.0,
                imm_count: 0,
                flush_progress: 0.0,
                l0_files: 0,
                compacting: None,
                compaction_progress: 0.0,
                lower_bytes: 0.0,
                write_slot_us: 0.0,
                ops: BTreeMap::new(),
                stall_us: 0.0,
                cache_hits: 0.0,
                cache_lookups: 0.0,
                fg_busy_us: 0.0,
                bg_busy_us: 0.0,
                fault: None,
                recording: None,
                closed: false,
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, SimState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs one operation issued at virtual time `at_us` and returns its
    /// modeled latency in µs. Issue times may interleave across clients but
    /// must not go backwards by more than one latency.
    pub fn execute_at(&self, at_us: f64, op: SimOp<'_>) -> Result<f64, EngineError> {
        let mut st = self.lock();
        st.execute(at_us, op, None)
    }

    /// Slows every operation issued at or after `from_us` by `factor`,
    /// including background bandwidth.
    pub fn inject_slowdown(&self, from_us: f64, factor: f64) {
        self.lock().fault = Some(Fault {
            from_us,
            factor: factor.max(1.0),
        });
    }

    pub fn clear_faults(&self) {
        self.lock().fault = None;
    }

    /// Starts recording executed operations as trace records.
    pub fn start_recording(&self) {
        self.lock().recording = Some(Vec::new());
    }

    pub fn take_recording(&self) -> Vec<TraceRecord> {
        self.lock().recording.take().unwrap_or_default()
    }

    pub fn options(&self) -> OptionsDocument {
        self.lock().doc.clone()
    }

    pub fn modeled_usage(&self) -> ModeledUsage {
        let st = self.lock();
        let mem = st.active_bytes
            + st.imm_count as f64 * st.cfg.write_buffer_size
            + st.cfg.cache_bytes.min(st.live_bytes);
        ModeledUsage {
            cpu_busy_us: st.fg_busy_us + st.bg_busy_us,
            rss_bytes: BASE_RSS_BYTES + mem as u64,
        }
    }

    /// Modeled block cache hit probability for the current working set.
    pub fn modeled_hit_ratio(&self) -> f64 {
        self.lock().hit_ratio()
    }

    pub fn now_us(&self) -> f64 {
        self.lock().now_us
    }
}

impl SimState {
    fn hit_ratio(&self) -> f64 {
        if self.live_bytes <= 0.0 {
            1.0
        } else {
            (self.cfg.cache_bytes / self.live_bytes).min(1.0)
        }
    }

    fn fault_factor(&self, at_us: f64) -> f64 {
        match self.fault {
            Some(f) if at_us >= f.from_us => f.factor,
            _ => 1.0,
        }
    }

    fn bandwidth_at(&self, at_us: f64) -> f64 {
        self.cfg.bandwidth() / self.fault_factor(at_us)
    }

    /// Drains background work between `now_us` and `to_us`.
    fn advance(&mut self, to_us: f64) {
        if to_us <= self.now_us {
            return;
        }
        let bw = self.bandwidth_at(self.now_us);
        let mut budget = bw * (to_us - self.now_us);
        let start_budget = budget;
        self.now_us = to_us;
        while budget > 0.0 {
            if self.imm_count > 0 {
                let need = self.cfg.flush_cost() - self.flush_progress;
                if budget >= need {
                    budget -= need;
                    self.imm_count -= 1;
                    self.flush_progress = 0.0;
                    self.l0_files += 1;
                } else {
                    self.flush_progress += budget;
                    budget = 0.0;
                }
                continue;
            }
            if self.compacting.is_none()
                && !self.cfg.disable_auto_compactions
                && self.l0_files >= self.cfg.l0_trigger
            {
                self.compacting = Some(self.l0_files);
                self.compaction_progress = 0.0;
            }
            let Some(files) = self.compacting else { break };
            let need = files as f64 * self.cfg.compaction_cost_per_file() - self.compaction_progress;
            if budget >= need {
                budget -= need;
                self.l0_files -= files;
                self.lower_bytes += files as f64 * self.cfg.write_buffer_size * self.cfg.compression_ratio;
                self.compacting = None;
                self.compaction_progress = 0.0;
            } else {
                self.compaction_progress += budget;
                budget = 0.0;
            }
        }
        let used = start_budget - budget;
        self.bg_busy_us += used / JOB_BANDWIDTH;
    }

    fn pending_compaction_bytes(&self) -> f64 {
        let per_file = self.cfg.compaction_cost_per_file();
        (self.l0_files as f64 * per_file - self.compaction_progress).max(0.0)
            + self.imm_count as f64 * self.cfg.flush_cost()
            - self.flush_progress
    }

    /// Non-empty levels below L0 with their byte sizes.
    fn lower_levels(&self) -> Vec<f64> {
        let mut left = self.lower_bytes;
        let mut cap = self.cfg.level_base;
        let mut out = Vec::new();
        while left > 0.0 {
            let take = left.min(cap);
            out.push(take);
            left -= take;
            cap *= self.cfg.level_multiplier;
        }
        out
    }

    fn block_read_cost(&mut self, reads: f64) -> (f64, f64) {
        let h = self.hit_ratio();
        self.cache_hits += reads * h;
        self.cache_lookups += reads;
        (reads * h * BLOCK_HIT_US, reads * (1.0 - h) * BLOCK_MISS_US)
    }

    fn write_cost(&mut self, at_us: f64, bytes: f64) -> f64 {
        let cfg = &self.cfg;
        let fg = (PUT_BASE_US + PUT_PER_BYTE_US * bytes) * cfg.fg_factor();
        self.active_bytes += bytes;
        if self.active_bytes >= self.cfg.write_buffer_size {
            self.active_bytes = 0.0;
            self.imm_count += 1;
        }
        let bw = self.bandwidth_at(at_us);
        let mut wait = 0.0;
        if self.imm_count >= self.cfg.max_write_buffer_number {
            wait += (self.cfg.flush_cost() - self.flush_progress) / bw;
        }
        let pending = self.pending_compaction_bytes();
        let stop = !self.cfg.disable_auto_compactions
            && (self.l0_files >= self.cfg.l0_stop
                || (self.cfg.hard_pending > 0.0 && pending >= self.cfg.hard_pending));
        if stop {
            let remaining = match self.compacting {
                Some(files) => files as f64 * self.cfg.compaction_cost_per_file() - self.compaction_progress,
                None => self.l0_files as f64 * self.cfg.compaction_cost_per_file(),
            };
            wait += remaining.max(0.0) / bw;
        } else if self.l0_files >= self.cfg.l0_slowdown
            || (self.cfg.soft_pending > 0.0 && pending >= self.cfg.soft_pending)
        {
            let slot = self.write_slot_us.max(at_us);
            self.write_slot_us = slot + bytes / self.cfg.delayed_write_rate;
            wait += self.write_slot_us - at_us;
        }
        self.stall_us += wait;
        self.fg_busy_us += fg;
        fg + wait
    }

    fn read_cost(&mut self, found: bool) -> f64 {
        let runs = self.l0_files as f64 + self.lower_levels().len() as f64;
        let fg = GET_BASE_US * self.cfg.fg_factor() + PROBE_US * runs;
        let reads = if runs == 0.0 {
            0.0
        } else if self.cfg.bloom {
            let fp = BLOOM_FALSE_POSITIVE * runs;
            if found { 1.0 + fp } else { fp }
        } else if found {
            (runs + 1.0) / 2.0
        } else {
            runs
        };
        let (hit, miss) = self.block_read_cost(reads);
        self.fg_busy_us += fg + hit;
        fg + hit + miss
    }

    fn seek_cost(&mut self, returned: usize, entry_bytes: f64) -> f64 {
        let runs = self.l0_files as f64 + self.lower_levels().len() as f64;
        let fg = SEEK_BASE_US * self.cfg.fg_factor()
            + PROBE_US * runs
            + SEEK_PER_ENTRY_US * returned as f64;
        let reads = if runs == 0.0 {
            0.0
        } else {
            runs + returned as f64 * entry_bytes / self.cfg.block_size
        };
        let (hit, miss) = self.block_read_cost(reads);
        self.fg_busy_us += fg + hit;
        fg + hit + miss
    }

    fn record(&mut self, at_us: f64, op: Op, key: &[u8], value_size: u64) {
        if let Some(rec) = self.recording.as_mut() {
            rec.push(TraceRecord::new(at_us.max(0.0) as u64, op, key, value_size));
        }
    }

    fn execute(
        &mut self,
        at_us: f64,
        op: SimOp<'_>,
        mut out: Option<&mut OpOutput>,
    ) -> Result<f64, EngineError> {
        if self.closed {
            return Err(EngineError::Closed);
        }
        let at_us = at_us.max(0.0);
        self.advance(at_us);
        let factor = self.fault_factor(at_us);
        let latency = match op {
            SimOp::Put(key, value) => {
                let bytes = (key.len() + value.len()) as f64;
                let stored = Stored::new(value);
                if let Some(old) = self.data.insert(key.to_vec(), stored) {
                    self.live_bytes -= (key.len() + old.len()) as f64;
                }
                self.live_bytes += bytes;
                self.record(at_us, Op::Put, key, value.len() as u64);
                self.write_cost(at_us, bytes)
            }
            SimOp::Delete(key) => {
                if let Some(old) = self.data.remove(key) {
                    self.live_bytes -= (key.len() + old.len()) as f64;
                }
                self.record(at_us, Op::Delete, key, 0);
                self.write_cost(at_us, key.len() as f64)
            }
            SimOp::Get(key) => {
                let value = self.data.get(key);
                let found = value.is_some();
                if let Some(OpOutput::Value(slot)) = out.as_deref_mut() {
                    *slot = value.map(Stored::to_vec);
                }
                self.record(at_us, Op::Get, key, 0);
                self.read_cost(found)
            }
            SimOp::Seek(start, n) => {
                let mut count = 0usize;
                let mut bytes = 0usize;
                let mut entries = Vec::new();
                let want = matches!(out, Some(OpOutput::Entries(_)));
                for (k, v) in self
                    .data
                    .range::<[u8], _>((Bound::Included(start), Bound::Unbounded))
                    .take(n)
                {
                    count += 1;
                    bytes += k.len() + v.len();
                    if want {
                        entries.push((k.clone(), v.to_vec()));
                    }
                }
                if let Some(OpOutput::Entries(slot)) = out.as_deref_mut() {
                    *slot = entries;
                }
                self.record(at_us, Op::Seek, start, 0);
                let avg = if count > 0 { bytes as f64 / count as f64 } else { 0.0 };
                self.seek_cost(count, avg)
            }
        };
        *self.ops.entry(op.op()).or_insert(0) += 1;
        Ok(latency * factor)
    }

    fn stats(&self) -> EngineStats {
        let mut levels = vec![self.l0_files as u64];
        levels.extend(
            self.lower_levels()
                .iter()
                .map(|b| (b / self.cfg.target_file_size).ceil() as u64),
        );
        EngineStats {
            ops_completed: self.ops.clone(),
            write_stall_micros: self.stall_us as u64,
            pending_compaction_bytes: self.pending_compaction_bytes().max(0.0) as u64,
            level_file_counts: levels,
            block_cache_hit_ratio: if self.cache_lookups > 0.0 {
                self.cache_hits / self.cache_lookups
            } else {
                0.0
            },
        }
    }
}

enum OpOutput {
    Value(Option<Vec<u8>>),
    Entries(Vec<(Vec<u8>, Vec<u8>)>),
}

impl SimulatedEngine {
    fn serial(&self, op: SimOp<'_>, out: Option<&mut OpOutput>) -> Result<(), EngineError> {
        let mut st = self.lock();
        let at = st.serial_clock_us.max(st.now_us);
        let latency = st.execute(at, op, out)?;
        st.serial_clock_us = at + latency;
        Ok(())
    }
}

impl Engine for SimulatedEngine {
    fn kind(&self) -> EngineKind {
        EngineKind::Simulated
    }

    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), EngineError> {
        self.serial(SimOp::Put(key, value), None)
    }

    fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, EngineError> {
        let mut out = OpOutput::Value(None);
        self.serial(SimOp::Get(key), Some(&mut out))?;
        match out {
            OpOutput::Value(v) => Ok(v),
            OpOutput::Entries(_) => unreachable!(),
        }
    }

    fn delete(&self, key: &[u8]) -> Result<(), EngineError> {
        self.serial(SimOp::Delete(key), None)
    }

    fn seek(&self, start: &[u8], n: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>, EngineError> {
        let mut out = OpOutput::Entries(Vec::new());
        self.serial(SimOp::Seek(start, n), Some(&mut out))?;
        match out {
            OpOutput::Entries(v) => Ok(v),
            OpOutput::Value(_) => unreachable!(),
        }
    }

    fn set_mutable_options(
        &self,
        opts: &BTreeMap<String, String>,
    ) -> Result<BTreeMap<String, String>, EngineError> {
        let mut resolved = Vec::with_capacity(opts.len());
        for (name, value) in opts {
            let meta = self
                .catalog
                .get(name)
                .ok_or_else(|| EngineError::UnknownOption(name.clone()))?;
            if !meta.mutable_at_runtime {
                return Err(EngineError::ImmutableOption(name.clone()));
            }
            if !value_is_valid(meta, value) {
                return Err(EngineError::InvalidValue {
                    name: name.clone(),
                    value: value.clone(),
                });
            }
            resolved.push(meta);
        }
        let mut st = self.lock();
        if st.closed {
            return Err(EngineError::Closed);
        }
        let mut doc = st.doc.clone();
        let mut applied = BTreeMap::new();
        for meta in resolved {
            let value = &opts[&meta.name];
            if self.catalog.value_in(&doc, &meta.name) == Some(value.as_str())
                && doc.get_in_kind(&meta.section, &meta.name).is_some()
            {
                continue;
            }
            let section = self.catalog.section_name_in(&doc, meta);
            doc.set(&section, &meta.name, value);
            applied.insert(meta.name.clone(), value.clone());
        }
        let cfg = SimConfig::from_doc(&doc, &self.catalog)?;
        st.doc = doc;
        st.cfg = cfg;
        Ok(applied)
    }

    fn stats(&self) -> EngineStats {
        self.lock().stats()
    }

    fn close(&self) -> Result<(), EngineError> {
        self.lock().closed = true;
        Ok(())
    }

    fn as_simulated(&self) -> Option<&SimulatedEngine> {
        Some(self)
    }
}

/// Per-key access counts of a recorded trace, keyed by key bytes.
pub fn access_counts(records: &[TraceRecord]) -> HashMap<&[u8], u64> {
    let mut m = HashMap::new();
    for r in records {
        *m.entry(r.key.as_slice()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::default_options;

    fn engine_with(edits: &[(&str, &str)]) -> SimulatedEngine {
        let mut doc = default_options();
        let cat = Catalog::builtin();
        for (name, value) in edits {
            let meta = cat.get(name).unwrap();
            let section = cat.section_name_in(&doc, meta);
            doc.set(&section, name, value);
        }
        SimulatedEngine::open(&doc, Arc::new(cat.clone())).unwrap()
    }

    #[test]
    fn put_get_delete() {
        let e = engine_with(&[]);
        e.put(b"a", b"1").unwrap();
        assert_eq!(e.get(b"a").unwrap(), Some(b"1".to_vec()));
        e.put(b"a", &[7u8; 100]).unwrap();
        assert_eq!(e.get(b"a").unwrap(), Some(vec![7u8; 100]));
        e.delete(b"a").unwrap();
        assert_eq!(e.get(b"a").unwrap(), None);
        let s = e.stats();
        assert_eq!(s.ops_completed[&Op::Put], 2);
        assert_eq!(s.ops_completed[&Op::Get], 3);
    }

    #[test]
    fn seek_full_range_in_order() {
        let e = engine_with(&[]);
        for i in (0..200u32).rev() {
            e.put(format!("k{i:05}").as_bytes(), b"v").unwrap();
        }
        let all = e.seek(b"", usize::MAX).unwrap();
        assert_eq!(all.len(), 200);
        assert!(all.windows(2).all(|w| w[0].0 < w[1].0));
        let tail = e.seek(b"k00150", 10).unwrap();
        assert_eq!(tail.len(), 10);
        assert_eq!(tail[0].0, b"k00150");
    }

    #[test]
    fn immutable_option_rejected() {
        let e = engine_with(&[]);
        let mut m = BTreeMap::new();
        m.insert("num_levels".to_string(), "5".to_string());
        assert!(matches!(
            e.set_mutable_options(&m),
            Err(EngineError::ImmutableOption(n)) if n == "num_levels"
        ));
        m.clear();
        m.insert("max_background_jobs".to_string(), "8".to_string());
        m.insert("write_buffer_size".to_string(), "67108864".to_string());
        let applied = e.set_mutable_options(&m).unwrap();
        assert_eq!(applied.len(), 1, "{applied:?}");
        assert_eq!(
            e.options().get("DBOptions", "max_background_jobs"),
            Some("8")
        );
    }

    #[test]
    fn bandwidth_peaks_at_eight_jobs() {
        let cfg = |j: u32| {
            let mut c = SimConfig::from_doc(&default_options(), Catalog::builtin()).unwrap();
            c.jobs = j;
            c.bandwidth()
        };
        let peak = (1..=16).max_by(|&a, &b| cfg(a).total_cmp(&cfg(b))).unwrap();
        assert_eq!(peak, 8);
    }

    #[test]
    fn write_stalls_when_background_falls_behind() {
        let e = engine_with(&[("write_buffer_size", "1048576"), ("max_background_jobs", "1")]);
        let value = vec![b'x'; 1000];
        let mut t = 0.0;
        for i in 0..20_000u32 {
            t += e.execute_at(t, SimOp::Put(format!("{i:08}").as_bytes(), &value)).unwrap();
        }
        assert!(e.stats().write_stall_micros > 0);
    }

    #[test]
    fn larger_cache_reads_faster() {
        let run = |cache: &str| {
            let e = engine_with(&[("write_buffer_size", "1048576"), ("block_cache_size", cache)]);
            let value = vec![b'x'; 1000];
            let mut t = 0.0;
            for i in 0..20_000u32 {
                t += e.execute_at(t, SimOp::Put(format!("{i:08}").as_bytes(), &value)).unwrap();
            }
            let mut total = 0.0;
            for i in 0..2_000u32 {
                let lat = e.execute_at(t, SimOp::Get(format!("{:08}", i * 7).as_bytes())).unwrap();
                total += lat;
                t += lat;
            }
            (e.modeled_hit_ratio(), total)
        };
        let (h1, l1) = run("4194304");
        let (h2, l2) = run("8388608");
        assert!(h2 >= h1 && l2 <= l1, "{h1} {l1} {h2} {l2}");
        assert!(h2 > h1);
    }

    #[test]
    fn slowdown_fault_scales_latency() {
        let e = engine_with(&[]);
        let a = e.execute_at(0.0, SimOp::Get(b"x")).unwrap();
        e.inject_slowdown(10.0, 2.0);
        let b = e.execute_at(20.0, SimOp::Get(b"x")).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-9);
    }
}
