use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::atomic::Ordering;

use super::{
    clamp_cpu, engine_failure, finish_result, prefill_phase, procfs, BenchConfig, BenchError,
    BenchObserver, BenchmarkResult, Control, LatencyHistogram, TelemetrySnapshot, TokenBucket,
    WindowAcc,
};
use crate::engine::sim::{SimOp, SimulatedEngine};
use crate::engine::{Engine, EngineError};
use crate::trace::Op;
use crate::workload::{GeneratedOp, PhaseGenerator, RngState, WorkloadSpec};

struct Client {
    rng: RngState,
    bucket: Option<TokenBucket>,
}

/// Window bookkeeping shared by the event loop.
struct Sampler<'a> {
    spec: &'a WorkloadSpec,
    sim: &'a SimulatedEngine,
    engine: &'a dyn Engine,
    cfg: &'a BenchConfig,
    base_us: f64,
    period_us: f64,
    index: u64,
    acc: WindowAcc,
    last_cpu_us: f64,
    cores: u32,
    timeline: Vec<TelemetrySnapshot>,
    overall: LatencyHistogram,
    op_counts: BTreeMap<Op, u64>,
    phase: usize,
}

impl Sampler<'_> {
    fn window_end_us(&self) -> f64 {
        self.base_us + (self.index + 1) as f64 * self.period_us
    }

    /// Closes the current window, ending at `end_us`.
    fn close(&mut self, end_us: f64, observer: &mut dyn BenchObserver) -> Control {
        let start_us = self.base_us + self.index as f64 * self.period_us;
        let len_us = end_us - start_us;
        let usage = self.sim.modeled_usage();
        let cpu = if len_us > 0.0 {
            clamp_cpu((usage.cpu_busy_us - self.last_cpu_us) / len_us * 100.0, self.cores)
        } else {
            0.0
        };
        self.last_cpu_us = usage.cpu_busy_us;
        let snap = self.acc.snapshot(
            (end_us - self.base_us) / 1e6,
            len_us / 1e6,
            self.phase,
            self.engine.stats(),
            Some(cpu),
            Some(usage.rss_bytes),
        );
        self.overall.merge(&self.acc.hist);
        for (op, c) in &self.acc.ops {
            *self.op_counts.entry(*op).or_insert(0) += c;
        }
        self.acc = WindowAcc::default();
        self.index += 1;
        let verdict = observer.on_snapshot(&snap, self.engine);
        self.timeline.push(snap);
        if let Some(stop) = &self.cfg.stop {
            if stop.load(Ordering::SeqCst) {
                return Control::Halt("interrupted".into());
            }
        }
        verdict
    }

    /// Closes every window that ends at or before `t_us`.
    fn catch_up(&mut self, t_us: f64, observer: &mut dyn BenchObserver) -> Option<String> {
        while t_us >= self.window_end_us() {
            if let Control::Halt(why) = self.close(self.window_end_us(), observer) {
                return Some(why);
            }
        }
        None
    }

    fn result(&mut self, duration_s: f64, halted: Option<String>) -> BenchmarkResult {
        finish_result(
            self.spec,
            self.cfg,
            std::mem::take(&mut self.timeline),
            &self.overall,
            std::mem::take(&mut self.op_counts),
            duration_s,
            halted,
        )
    }

    fn partial(&self) -> BenchmarkResult {
        let mut overall = self.overall.clone();
        overall.merge(&self.acc.hist);
        let mut counts = self.op_counts.clone();
        for (op, c) in &self.acc.ops {
            *counts.entry(*op).or_insert(0) += c;
        }
        finish_result(
            self.spec,
            self.cfg,
            self.timeline.clone(),
            &overall,
            counts,
            self.index as f64 * self.period_us / 1e6,
            None,
        )
    }
}

fn execute(sim: &SimulatedEngine, at: f64, g: &GeneratedOp, values: &[u8]) -> Result<f64, EngineError> {
    let op = match g.op {
        Op::Put | Op::Merge => SimOp::Put(&g.key, &values[..g.value_len as usize]),
        Op::Get => SimOp::Get(&g.key),
        Op::Delete => SimOp::Delete(&g.key),
        Op::Seek => SimOp::Seek(&g.key, g.scan_len as usize),
    };
    sim.execute_at(at, op)
}

/// Issue times are ordered by their bit patterns, which for non-negative
/// floats matches numeric order.
type Event = Reverse<(u64, u64)>;

pub(super) fn run(
    spec: &WorkloadSpec,
    sim: &SimulatedEngine,
    engine: &dyn Engine,
    cfg: &BenchConfig,
    observer: &mut dyn BenchObserver,
) -> Result<BenchmarkResult, BenchError> {
    let generators = spec
        .phases
        .iter()
        .enumerate()
        .map(|(i, _)| PhaseGenerator::new(spec, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut values: Vec<u8> = Vec::new();

    let mut t = sim.now_us();
    if cfg.prefill {
        if let Some(pi) = prefill_phase(spec) {
            let g = &generators[pi];
            let mut rng = RngState::derive(spec.seed, u64::MAX - 1, pi as u64);
            for i in 0..spec.phases[pi].key_space {
                let key = g.mapper().key_for(i);
                let len = g.value_sampler().sample(&mut rng) as usize;
                grow(&mut values, len);
                let lat = sim
                    .execute_at(t, SimOp::Put(&key, &values[..len]))
                    .map_err(|e| engine_failure(e, empty_result(spec, cfg)))?;
                t += lat;
            }
        }
    }

    let mut s = Sampler {
        spec,
        sim,
        engine,
        cfg,
        base_us: t,
        period_us: cfg.sampler_period_s * 1e6,
        index: 0,
        acc: WindowAcc::default(),
        last_cpu_us: sim.modeled_usage().cpu_busy_us,
        cores: if cfg.limits.cpu_cores > 0 { cfg.limits.cpu_cores } else { procfs::available_cores() },
        timeline: Vec::new(),
        overall: LatencyHistogram::new(),
        op_counts: BTreeMap::new(),
        phase: 0,
    };
    let base = s.base_us;

    for (pi, phase) in spec.phases.iter().enumerate() {
        let start = base + phase.start_time_s * 1e6;
        let end = base + phase.end_time_s() * 1e6;
        if let Some(why) = s.catch_up(start, observer) {
            let d = s.index as f64 * cfg.sampler_period_s;
            return Ok(s.result(d, Some(why)));
        }
        s.phase = pi;
        let threads = phase.client_threads as u64;
        let rate_per_thread = phase.target_ops_per_s.map(|r| r as f64 / threads as f64);
        let mut clients: Vec<Client> = (0..threads)
            .map(|th| Client {
                rng: RngState::derive(spec.seed, th, pi as u64),
                bucket: rate_per_thread.map(|r| {
                    let interval = 1e6 / r;
                    TokenBucket::new(r, start + interval * th as f64 / threads as f64)
                }),
            })
            .collect();
        let mut heap: BinaryHeap<Event> = BinaryHeap::new();
        for (th, c) in clients.iter_mut().enumerate() {
            let issue = c.bucket.as_mut().map_or(start, |b| b.take(start));
            heap.push(Reverse((issue.to_bits(), th as u64)));
        }
        let gen = &generators[pi];
        while let Some(Reverse((bits, th))) = heap.pop() {
            let issue = f64::from_bits(bits);
            if issue >= end {
                continue;
            }
            if let Some(why) = s.catch_up(issue, observer) {
                let d = s.index as f64 * cfg.sampler_period_s;
                return Ok(s.result(d, Some(why)));
            }
            let c = &mut clients[th as usize];
            let g = gen.next_op(&mut c.rng);
            grow(&mut values, g.value_len as usize);
            let latency = match execute(sim, issue, &g, &values) {
                Ok(l) => l,
                Err(e) => return Err(engine_failure(e, s.partial())),
            };
            s.acc.record(g.op, latency, g.value_len);
            let ready = issue + latency;
            let next = c.bucket.as_mut().map_or(ready, |b| b.take(ready));
            heap.push(Reverse((next.to_bits(), th)));
        }
    }

    let end = base + spec.total_duration_s() * 1e6;
    if let Some(why) = s.catch_up(end, observer) {
        let d = s.index as f64 * cfg.sampler_period_s;
        return Ok(s.result(d, Some(why)));
    }
    let window_start = base + s.index as f64 * s.period_us;
    let mut halted = None;
    if end > window_start + 1e-6 {
        if let Control::Halt(why) = s.close(end, observer) {
            halted = Some(why);
        }
    }
    Ok(s.result(spec.total_duration_s(), halted))
}

fn grow(values: &mut Vec<u8>, len: usize) {
    if values.len() < len {
        values.resize(len, b'v');
    }
}

fn empty_result(spec: &WorkloadSpec, cfg: &BenchConfig) -> BenchmarkResult {
    finish_result(spec, cfg, Vec::new(), &LatencyHistogram::new(), BTreeMap::new(), 0.0, None)
}
