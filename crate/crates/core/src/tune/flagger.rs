//! Throughput degradation flagger.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::bench::{BenchObserver, Control, TelemetrySnapshot};
use crate::engine::{Engine, OptionChange};

pub const DEFAULT_DEGRADATION_THRESHOLD: f64 = 0.10;
pub const DEFAULT_ROLLING_WINDOWS: usize = 30;
pub const DEFAULT_WARMUP_WINDOWS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlaggerConfig {
    pub degradation_threshold_frac: f64,
    pub rolling_windows: usize,
    pub warmup_windows: usize,
}

impl Default for FlaggerConfig {
    fn default() -> Self {
        FlaggerConfig {
            degradation_threshold_frac: DEFAULT_DEGRADATION_THRESHOLD,
            rolling_windows: DEFAULT_ROLLING_WINDOWS,
            warmup_windows: DEFAULT_WARMUP_WINDOWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationEvent {
    pub window_throughput: f64,
    pub baseline: f64,
    /// Set by the observer; the standalone flagger does not know timestamps.
    pub ts_s: Option<f64>,
    pub changes: Vec<OptionChange>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlaggerState {
    pub rolling_throughput: VecDeque<f64>,
    /// Median of the rolling windows as of the last observation.
    pub baseline: Option<f64>,
    pub cfg: FlaggerConfig,
    /// `diff_options(previous, current)`, carried by every event.
    pub changes: Vec<OptionChange>,
}

impl FlaggerState {
    pub fn new(cfg: FlaggerConfig, changes: Vec<OptionChange>) -> Self {
        FlaggerState {
            rolling_throughput: VecDeque::new(),
            baseline: None,
            cfg,
            changes,
        }
    }

    /// Pre-loads completed windows, e.g. from the last accepted run.
    pub fn seed(&mut self, windows: impl IntoIterator<Item = f64>) {
        for w in windows {
            self.push(w);
        }
    }

    fn push(&mut self, w: f64) {
        self.rolling_throughput.push_back(w);
        while self.rolling_throughput.len() > self.cfg.rolling_windows.max(1) {
            self.rolling_throughput.pop_front();
        }
    }

    pub fn is_warm(&self) -> bool {
        self.rolling_throughput.len() >= self.cfg.warmup_windows
    }
}

fn median(values: &VecDeque<f64>) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Checks one completed window against the rolling median of the windows
/// before it, then adds it to the rolling set. Nothing fires until
/// `warmup_windows` windows have been seen.
pub fn throughput_flagger(state: &mut FlaggerState, window_throughput: f64) -> Option<DegradationEvent> {
    let mut event = None;
    if state.is_warm() {
        let baseline = median(&state.rolling_throughput);
        state.baseline = Some(baseline);
        if window_throughput < (1.0 - state.cfg.degradation_threshold_frac) * baseline {
            event = Some(DegradationEvent {
                window_throughput,
                baseline,
                ts_s: None,
                changes: state.changes.clone(),
            });
        }
    }
    state.push(window_throughput);
    event
}

/// Benchmark observer running one flagger per workload phase, so a phase
/// with a naturally different rate is not mistaken for a degradation. It
/// halts the run on the first event.
///
/// When a reference run is given, an event also requires the window to be
/// below the threshold relative to the reference run at the same position in
/// the phase (median of the aligned window and its neighbours). A slowdown
/// the reference run showed at the same point, such as memtables filling
/// after start-up, is then not attributed to the option changes.
#[derive(Debug, Clone)]
pub struct FlaggerObserver {
    cfg: FlaggerConfig,
    changes: Vec<OptionChange>,
    per_phase: BTreeMap<usize, FlaggerState>,
    aligned: BTreeMap<usize, Vec<f64>>,
    seen: BTreeMap<usize, usize>,
    pub event: Option<DegradationEvent>,
}

impl FlaggerObserver {
    /// `reference` holds completed windows of a previous run, used as each
    /// phase's starting baseline.
    pub fn new(cfg: FlaggerConfig, changes: Vec<OptionChange>, reference: &[TelemetrySnapshot]) -> Self {
        let mut per_phase: BTreeMap<usize, FlaggerState> = BTreeMap::new();
        let mut aligned: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for s in reference {
            per_phase
                .entry(s.phase)
                .or_insert_with(|| FlaggerState::new(cfg, changes.clone()))
                .seed([s.throughput_ops_s]);
            aligned.entry(s.phase).or_default().push(s.throughput_ops_s);
        }
        FlaggerObserver {
            cfg,
            changes,
            per_phase,
            aligned,
            seen: BTreeMap::new(),
            event: None,
        }
    }

    fn aligned_reference(&self, phase: usize, k: usize) -> Option<f64> {
        let r = self.aligned.get(&phase)?;
        if k >= r.len() {
            return None;
        }
        let mut near: Vec<f64> = r[k.saturating_sub(1)..(k + 2).min(r.len())].to_vec();
        near.sort_by(f64::total_cmp);
        Some(near[near.len() / 2])
    }

    pub fn observe(&mut self, snap: &TelemetrySnapshot) -> Option<DegradationEvent> {
        let (cfg, changes) = (self.cfg, &self.changes);
        let state = self
            .per_phase
            .entry(snap.phase)
            .or_insert_with(|| FlaggerState::new(cfg, changes.clone()));
        let fired = throughput_flagger(state, snap.throughput_ops_s);
        let seen = self.seen.entry(snap.phase).or_default();
        let k = *seen;
        *seen += 1;
        let mut event = fired?;
        if let Some(r) = self.aligned_reference(snap.phase, k) {
            if snap.throughput_ops_s >= (1.0 - cfg.degradation_threshold_frac) * r {
                return None;
            }
        }
        event.ts_s = Some(snap.ts_s);
        Some(event)
    }
}

impl BenchObserver for FlaggerObserver {
    fn on_snapshot(&mut self, snap: &TelemetrySnapshot, _engine: &dyn Engine) -> Control {
        if self.event.is_some() {
            return Control::Continue;
        }
        match self.observe(snap) {
            Some(ev) => {
                let why = format!(
                    "throughput {:.1} ops/s fell below {:.0}% of the {:.1} ops/s baseline at t={}s",
                    ev.window_throughput,
                    (1.0 - self.cfg.degradation_threshold_frac) * 100.0,
                    ev.baseline,
                    snap.ts_s
                );
                self.event = Some(ev);
                Control::Halt(why)
            }
            None => Control::Continue,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(stream: &[f64]) -> Vec<usize> {
        let mut st = FlaggerState::new(FlaggerConfig::default(), Vec::new());
        stream
            .iter()
            .enumerate()
            .filter_map(|(i, w)| throughput_flagger(&mut st, *w).map(|_| i))
            .collect()
    }

    #[test]
    fn constant_stream_never_fires() {
        assert!(run(&[1000.0; 200]).is_empty());
    }

    #[test]
    fn half_drop_fires_at_once() {
        let mut s = vec![1000.0; 20];
        s.extend([500.0; 10]);
        assert_eq!(run(&s).first(), Some(&20));
    }

    #[test]
    fn five_percent_drop_is_tolerated() {
        let mut s = vec![1000.0; 20];
        s.extend([950.0; 40]);
        assert!(run(&s).is_empty());
    }

    fn snaps(tp: &[f64]) -> Vec<TelemetrySnapshot> {
        tp.iter()
            .enumerate()
            .map(|(i, t)| TelemetrySnapshot {
                ts_s: (i + 1) as f64,
                window_s: 1.0,
                window_ops: *t as u64,
                throughput_ops_s: *t,
                p99_latency_us: 0.0,
                cpu_percent: None,
                rss_bytes: None,
                engine: Default::default(),
                realized_op_ratios: BTreeMap::new(),
                mean_value_size: None,
                phase: 0,
            })
            .collect()
    }

    fn first_event(reference: &[f64], run: &[f64]) -> Option<usize> {
        let mut obs = FlaggerObserver::new(FlaggerConfig::default(), Vec::new(), &snaps(reference));
        snaps(run).iter().position(|s| obs.observe(s).is_some())
    }

    #[test]
    fn decay_seen_in_reference_is_not_flagged() {
        let decay: Vec<f64> = (0..20).map(|i| 1000.0 * 0.9f64.powi(i)).collect();
        assert_eq!(first_event(&decay, &decay), None);
        let better: Vec<f64> = decay.iter().map(|t| t * 1.3).collect();
        assert_eq!(first_event(&decay, &better), None);
        assert!(run(&decay).first().is_some());
    }

    #[test]
    fn step_drop_against_reference_fires() {
        let flat = vec![1000.0; 20];
        let mut stepped = vec![1000.0; 10];
        stepped.extend([500.0; 10]);
        assert_eq!(first_event(&flat, &stepped), Some(10));
    }

    #[test]
    fn quiet_during_warmup() {
        assert!(run(&[1000.0, 1000.0, 1000.0, 1000.0, 10.0]).is_empty());
        assert_eq!(run(&[1000.0, 1000.0, 1000.0, 1000.0, 1000.0, 10.0]), vec![5]);
    }
}
