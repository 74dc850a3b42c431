use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{
    clamp_cpu, engine_failure, finish_result, prefill_phase, procfs, AtomicHistogram, BenchConfig,
    BenchError, BenchObserver, BenchmarkResult, Control, LatencyHistogram, TokenBucket, WindowAcc,
};
use crate::engine::{Engine, EngineError};
use crate::trace::Op;
use crate::workload::{GeneratedOp, PhaseGenerator, RngState, WorkloadSpec};

struct WindowCounters {
    ops: [AtomicU64; 5],
    hist: AtomicHistogram,
    value_bytes: AtomicU64,
    value_ops: AtomicU64,
}

impl WindowCounters {
    fn new() -> Self {
        WindowCounters {
            ops: Default::default(),
            hist: AtomicHistogram::new(),
            value_bytes: AtomicU64::new(0),
            value_ops: AtomicU64::new(0),
        }
    }

    fn record(&self, op: Op, latency_us: f64, value_len: u64) {
        let i = Op::ALL.iter().position(|o| *o == op).expect("known op");
        self.ops[i].fetch_add(1, Ordering::Relaxed);
        self.hist.record(latency_us);
        if op.writes_value() {
            self.value_bytes.fetch_add(value_len, Ordering::Relaxed);
            self.value_ops.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn load(&self) -> WindowAcc {
        let mut ops = BTreeMap::new();
        for (i, op) in Op::ALL.iter().enumerate() {
            let c = self.ops[i].load(Ordering::Relaxed);
            if c > 0 {
                ops.insert(*op, c);
            }
        }
        WindowAcc {
            ops,
            hist: self.hist.snapshot(),
            value_bytes: self.value_bytes.load(Ordering::Relaxed),
            value_ops: self.value_ops.load(Ordering::Relaxed),
        }
    }
}

fn execute(engine: &dyn Engine, g: &GeneratedOp, values: &[u8]) -> Result<(), EngineError> {
    match g.op {
        Op::Put | Op::Merge => engine.put(&g.key, &values[..g.value_len as usize]),
        Op::Get => engine.get(&g.key).map(|_| ()),
        Op::Delete => engine.delete(&g.key),
        Op::Seek => engine.seek(&g.key, g.scan_len as usize).map(|_| ()),
    }
}

fn sleep_until(t0: Instant, at_us: f64, stop: &AtomicBool) {
    loop {
        let now = t0.elapsed().as_secs_f64() * 1e6;
        if now >= at_us || stop.load(Ordering::Relaxed) {
            return;
        }
        let left = Duration::from_secs_f64(((at_us - now) / 1e6).min(0.05));
        std::thread::sleep(left);
    }
}

pub(super) fn run(
    spec: &WorkloadSpec,
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
    let mut values = vec![b'v'; 4096];

    if cfg.prefill {
        if let Some(pi) = prefill_phase(spec) {
            let g = &generators[pi];
            let mut rng = RngState::derive(spec.seed, u64::MAX - 1, pi as u64);
            for i in 0..spec.phases[pi].key_space {
                let key = g.mapper().key_for(i);
                let len = g.value_sampler().sample(&mut rng) as usize;
                if values.len() < len {
                    values.resize(len, b'v');
                }
                engine.put(&key, &values[..len]).map_err(|e| {
                    engine_failure(
                        e,
                        finish_result(spec, cfg, Vec::new(), &LatencyHistogram::new(), BTreeMap::new(), 0.0, None),
                    )
                })?;
            }
        }
    }

    let period_us = cfg.sampler_period_s * 1e6;
    let total_us = spec.total_duration_s() * 1e6;
    let n_windows = (total_us / period_us).ceil().max(1.0) as usize;
    let windows: Vec<WindowCounters> = (0..n_windows).map(|_| WindowCounters::new()).collect();
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<EngineError>> = Mutex::new(None);
    let cores = if cfg.limits.cpu_cores > 0 { cfg.limits.cpu_cores } else { procfs::available_cores() };
    let mut timeline = Vec::new();
    let mut halted = None;
    let mut closed_windows = 0usize;
    let t0 = Instant::now();

    std::thread::scope(|scope| {
        let (windows, stop, failure, generators) = (&windows, &stop, &failure, &generators);
        scope.spawn(move || {
            for (pi, phase) in spec.phases.iter().enumerate() {
                let start = phase.start_time_s * 1e6;
                let end = phase.end_time_s() * 1e6;
                sleep_until(t0, start, stop);
                if stop.load(Ordering::Relaxed) {
                    return;
                }
                let threads = phase.client_threads as u64;
                let gen = &generators[pi];
                std::thread::scope(|inner| {
                    for th in 0..threads {
                        inner.spawn(move || {
                            let mut rng = RngState::derive(spec.seed, th, pi as u64);
                            let mut bucket = phase.target_ops_per_s.map(|r| {
                                let rate = r as f64 / threads as f64;
                                TokenBucket::new(rate, start + (1e6 / rate) * th as f64 / threads as f64)
                            });
                            let mut buf = vec![b'v'; 4096];
                            loop {
                                if stop.load(Ordering::Relaxed) {
                                    return;
                                }
                                let now = t0.elapsed().as_secs_f64() * 1e6;
                                let issue = bucket.as_mut().map_or(now, |b| b.take(now));
                                if issue >= end {
                                    return;
                                }
                                sleep_until(t0, issue, stop);
                                let g = gen.next_op(&mut rng);
                                if buf.len() < g.value_len as usize {
                                    buf.resize(g.value_len as usize, b'v');
                                }
                                let began = Instant::now();
                                let issued_at = t0.elapsed().as_secs_f64() * 1e6;
                                if let Err(e) = execute(engine, &g, &buf) {
                                    *failure.lock().unwrap_or_else(|p| p.into_inner()) = Some(e);
                                    stop.store(true, Ordering::SeqCst);
                                    return;
                                }
                                let latency = began.elapsed().as_secs_f64() * 1e6;
                                let w = ((issued_at / period_us) as usize).min(windows.len() - 1);
                                windows[w].record(g.op, latency, g.value_len);
                            }
                        });
                    }
                });
            }
        });

        let mut last_cpu = procfs::sample_process();
        let mut last_wall = t0.elapsed().as_secs_f64();
        for w in 0..n_windows {
            let end_us = ((w + 1) as f64 * period_us).min(total_us);
            sleep_until(t0, end_us, &stop);
            if failure.lock().unwrap_or_else(|p| p.into_inner()).is_some() {
                break;
            }
            let wall = t0.elapsed().as_secs_f64();
            let proc_now = procfs::sample_process();
            let cpu = match (last_cpu, proc_now) {
                (Some(a), Some(b)) if wall > last_wall => {
                    Some(clamp_cpu((b.cpu_seconds - a.cpu_seconds) / (wall - last_wall) * 100.0, cores))
                }
                _ => None,
            };
            last_cpu = proc_now;
            last_wall = wall;
            let start_us = w as f64 * period_us;
            let phase = spec
                .phases
                .iter()
                .rposition(|p| p.start_time_s * 1e6 <= start_us)
                .unwrap_or(0);
            let snap = windows[w].load().snapshot(
                end_us / 1e6,
                (end_us - start_us) / 1e6,
                phase,
                engine.stats(),
                cpu,
                proc_now.map(|p| p.rss_bytes),
            );
            closed_windows = w + 1;
            let verdict = observer.on_snapshot(&snap, engine);
            timeline.push(snap);
            let interrupted = cfg.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst));
            if let Control::Halt(why) = verdict {
                halted = Some(why);
            } else if interrupted {
                halted = Some("interrupted".into());
            }
            if halted.is_some() {
                stop.store(true, Ordering::SeqCst);
                break;
            }
        }
    });

    let mut overall = LatencyHistogram::new();
    let mut counts: BTreeMap<Op, u64> = BTreeMap::new();
    let upto = if halted.is_some() { closed_windows } else { n_windows };
    for w in &windows[..upto] {
        let acc = w.load();
        overall.merge(&acc.hist);
        for (op, c) in acc.ops {
            *counts.entry(op).or_insert(0) += c;
        }
    }
    // final counts include ops that finished after their window was sampled
    for (snap, w) in timeline.iter_mut().zip(&windows) {
        let acc = w.load();
        let fresh = acc.snapshot(snap.ts_s, snap.window_s, snap.phase, snap.engine.clone(), snap.cpu_percent, snap.rss_bytes);
        *snap = fresh;
    }
    let duration_s = if halted.is_some() {
        (closed_windows as f64 * period_us).min(total_us) / 1e6
    } else {
        spec.total_duration_s()
    };
    let result = finish_result(spec, cfg, timeline, &overall, counts, duration_s, halted);
    if let Some(e) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(engine_failure(e, result));
    }
    Ok(result)
}
