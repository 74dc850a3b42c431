//! JSON workload specifications and the operation streams that replay them.
//!
//! Schema (`spec_version` 1; durations in seconds, sizes in bytes):
//!
//! ```json
//! {
//!   "spec_version": 1,
//!   "name": "mixgraph",
//!   "seed": 42,
//!   "phases": [{
//!     "start_time_s": 0.0,
//!     "duration_s": 60.0,
//!     "workload_type": "ReadWriteMix",
//!     "query_ratios": {"Put": 0.14, "Get": 0.83, "Seek": 0.03},
//!     "key_size": {"tag": "Fixed", "value": 48.0},
//!     "value_size": {"tag": "Pareto", "shape": 1.5, "scale": 40.0},
//!     "value_size_stddev": 0.0,
//!     "access_dist": {"tag": "Zipfian", "s": 0.99, "n": 100000.0},
//!     "key_space": 100000,
//!     "client_threads": 8,
//!     "target_ops_per_s": 20000,
//!     "scan_length": 10
//!   }]
//! }
//! ```
//!
//! `target_ops_per_s` is optional (uncapped when absent) and `scan_length`
//! (entries read per Seek) defaults to 10. Unknown fields are rejected.

pub mod sample;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characterize::{DistributionFamily, WorkloadCharacterization};
use crate::trace::{Op, TimeWindowSummary};

pub use sample::{
    sample_key_index, sample_size, KeyMapper, KeySampler, RngState, SizeSampler,
};

pub const SPEC_VERSION: u32 = 1;
pub const DEFAULT_SCAN_LENGTH: u32 = 10;
/// Client threads in synthesized specs, matching db_bench's eight writers.
pub const DEFAULT_CLIENT_THREADS: u32 = 8;
const RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{path}: {reason}")]
pub struct SchemaError {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("unsupported distribution: {0}")]
    UnsupportedFamily(String),
    #[error("invalid workload spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorkloadType {
    FillRandom,
    ReadRandom,
    ReadWriteMix,
    SeekScanMix,
}

impl WorkloadType {
    /// Label matching a set of op ratios.
    pub fn for_ratios(ratios: &BTreeMap<Op, f64>) -> Self {
        let r = |op| ratios.get(&op).copied().unwrap_or(0.0);
        if r(Op::Seek) > 0.0 {
            WorkloadType::SeekScanMix
        } else if r(Op::Put) + r(Op::Merge) >= 1.0 - 1e-6 {
            WorkloadType::FillRandom
        } else if r(Op::Get) >= 1.0 - 1e-6 {
            WorkloadType::ReadRandom
        } else {
            WorkloadType::ReadWriteMix
        }
    }
}

fn default_scan_length() -> u32 {
    DEFAULT_SCAN_LENGTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadPhase {
    pub start_time_s: f64,
    pub duration_s: f64,
    pub workload_type: WorkloadType,
    pub query_ratios: BTreeMap<Op, f64>,
    pub key_size: DistributionFamily,
    pub value_size: DistributionFamily,
    pub value_size_stddev: f64,
    pub access_dist: DistributionFamily,
    pub key_space: u64,
    pub client_threads: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ops_per_s: Option<u64>,
    #[serde(default = "default_scan_length")]
    pub scan_length: u32,
}

impl WorkloadPhase {
    pub fn end_time_s(&self) -> f64 {
        self.start_time_s + self.duration_s
    }

    pub fn ratio(&self, op: Op) -> f64 {
        self.query_ratios.get(&op).copied().unwrap_or(0.0)
    }

    pub fn reads(&self) -> bool {
        self.ratio(Op::Get) > 0.0 || self.ratio(Op::Seek) > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub spec_version: u32,
    pub name: String,
    pub seed: u64,
    pub phases: Vec<WorkloadPhase>,
}

impl WorkloadSpec {
    pub fn total_duration_s(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.end_time_s())
    }

    /// Copy with every phase duration (and start time) multiplied by `factor`.
    pub fn scaled_duration(&self, factor: f64) -> WorkloadSpec {
        let mut s = self.clone();
        for p in &mut s.phases {
            p.start_time_s *= factor;
            p.duration_s *= factor;
        }
        s
    }
}

pub fn parse_spec(text: &str) -> Result<WorkloadSpec, SchemaError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: WorkloadSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let reason = inner.to_string();
        let mut path = if path == "." || path.is_empty() {
            "$".to_string()
        } else {
            format!("$.{path}")
        };
        for prefix in ["missing field `", "unknown field `"] {
            if let Some(rest) = reason.strip_prefix(prefix) {
                if let Some(field) = rest.split('`').next() {
                    if !path.ends_with(&format!(".{field}")) {
                        path = format!("{path}.{field}");
                    }
                }
            }
        }
        SchemaError { path, reason }
    })?;
    if spec.spec_version != SPEC_VERSION {
        return Err(SchemaError {
            path: "$.spec_version".into(),
            reason: format!("unsupported version {} (expected {SPEC_VERSION})", spec.spec_version),
        });
    }
    Ok(spec)
}

pub fn emit_spec(spec: &WorkloadSpec) -> String {
    serde_json::to_string_pretty(spec).expect("spec serializes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecViolation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

pub fn validate_spec(spec: &WorkloadSpec) -> Vec<SpecViolation> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(SpecViolation { path, message });
    if spec.spec_version != SPEC_VERSION {
        push("$.spec_version".into(), format!("must be {SPEC_VERSION}"));
    }
    if spec.phases.is_empty() {
        push("$.phases".into(), "at least one phase is required".into());
    }
    for (i, p) in spec.phases.iter().enumerate() {
        let at = |field: &str| format!("$.phases[{i}].{field}");
        if !(p.start_time_s.is_finite() && p.start_time_s >= 0.0) {
            push(at("start_time_s"), "must be a finite non-negative number".into());
        }
        if !(p.duration_s.is_finite() && p.duration_s > 0.0) {
            push(at("duration_s"), "must be positive".into());
        }
        if i > 0 {
            let prev = &spec.phases[i - 1];
            if p.start_time_s <= prev.start_time_s {
                push(
                    at("start_time_s"),
                    format!("phase {i} does not start after phase {}", i - 1),
                );
            } else if p.start_time_s < prev.end_time_s() - 1e-9 {
                push(
                    at("start_time_s"),
                    format!("phase {i} overlaps phase {}", i - 1),
                );
            }
        }
        if p.query_ratios.values().any(|r| !(r.is_finite() && *r >= 0.0)) {
            push(at("query_ratios"), format!("phase {i}: ratios must be non-negative"));
        }
        let sum: f64 = p.query_ratios.values().sum();
        if (sum - 1.0).abs() > RATIO_TOLERANCE {
            push(at("query_ratios"), format!("phase {i}: ratios sum to {sum}, expected 1"));
        }
        if p.client_threads < 1 {
            push(at("client_threads"), "must be at least 1".into());
        }
        if p.key_space < 1 {
            push(at("key_space"), "must be at least 1".into());
        }
        if p.target_ops_per_s == Some(0) {
            push(at("target_ops_per_s"), "must be at least 1 when set".into());
        }
        if !(p.value_size_stddev.is_finite() && p.value_size_stddev >= 0.0) {
            push(at("value_size_stddev"), "must be a finite non-negative number".into());
        }
        if let Err(e) = SizeSampler::new(&p.key_size, 0.0) {
            push(at("key_size"), e.to_string());
        }
        if let Err(e) = SizeSampler::new(&p.value_size, 0.0) {
            push(at("value_size"), e.to_string());
        }
        if p.key_space >= 1 {
            if let Err(e) = KeySampler::new(&p.access_dist, p.key_space) {
                push(at("access_dist"), e.to_string());
            }
        }
    }
    out
}

/// Knobs for [`synthesize_spec_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    pub name: String,
    pub seed: u64,
    pub client_threads: u32,
    /// Total operations the benchmark should issue; `None` keeps the trace's
    /// record count. Key space and duration scale by the same factor.
    pub target_records: Option<u64>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            name: "synthesized".into(),
            seed: 42,
            client_threads: DEFAULT_CLIENT_THREADS,
            target_records: None,
        }
    }
}

pub fn synthesize_spec(ch: &WorkloadCharacterization) -> WorkloadSpec {
    synthesize_spec_with(ch, &SynthesisConfig::default())
}

/// Builds a spec replaying the characterization: a single phase, or one phase
/// per period of the periodic hint with ratios and rates taken from the
/// source windows falling into that period.
pub fn synthesize_spec_with(ch: &WorkloadCharacterization, cfg: &SynthesisConfig) -> WorkloadSpec {
    let records = ch.total_records.max(1);
    let scale = cfg.target_records.map_or(1.0, |t| t.max(1) as f64 / records as f64);
    let duration = if ch.duration_s > 0.0 { ch.duration_s } else { 1.0 } * scale;
    let distinct = ((ch.distinct_keys.max(1) as f64 * scale).round() as u64).max(1);
    let access = stretch_ranks(&ch.key_access.family, scale);
    let key_space = calibrate_key_space(&access, distinct, records as f64 * scale);

    let template = |start: f64, len: f64, ratios: BTreeMap<Op, f64>, ops: f64| WorkloadPhase {
        start_time_s: start,
        duration_s: len,
        workload_type: WorkloadType::for_ratios(&ratios),
        query_ratios: ratios,
        key_size: ch.key_size.family.clone(),
        value_size: ch.value_size.family.clone(),
        value_size_stddev: ch.value_size_stddev,
        access_dist: access.clone(),
        key_space,
        client_threads: cfg.client_threads.max(1),
        target_ops_per_s: Some(((ops / len).round() as u64).max(1)),
        scan_length: DEFAULT_SCAN_LENGTH,
    };

    let mut phases = Vec::new();
    if let Some(hint) = ch.periodic_hint.as_ref().filter(|h| h.period_s > 0.0) {
        let period = hint.period_s * scale;
        let regimes = (duration / period).ceil().max(1.0) as usize;
        for k in 0..regimes {
            let start = k as f64 * period;
            let len = period.min(duration - start);
            if len <= 0.0 {
                break;
            }
            let lo_us = (k as f64 * hint.period_s * 1e6) as u64;
            let hi_us = ((k + 1) as f64 * hint.period_s * 1e6) as u64;
            let in_regime: Vec<&TimeWindowSummary> = ch
                .source_windows
                .iter()
                .filter(|w| w.window_start_us >= lo_us && w.window_start_us < hi_us)
                .collect();
            let (ratios, ops) = regime_ratios(&in_regime);
            let (ratios, ops) = match ratios {
                Some(r) => (r, ops as f64 * scale),
                None => (ch.query_ratios.clone(), records as f64 * scale * len / duration),
            };
            phases.push(template(start, len, ratios, ops));
        }
    }
    if phases.is_empty() {
        phases.push(template(0.0, duration, ch.query_ratios.clone(), records as f64 * scale));
    }
    WorkloadSpec {
        spec_version: SPEC_VERSION,
        name: cfg.name.clone(),
        seed: cfg.seed,
        phases,
    }
}

fn regime_ratios(windows: &[&TimeWindowSummary]) -> (Option<BTreeMap<Op, f64>>, u64) {
    let mut counts: BTreeMap<Op, u64> = BTreeMap::new();
    for w in windows {
        for (op, c) in &w.op_counts {
            *counts.entry(*op).or_insert(0) += c;
        }
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return (None, 0);
    }
    let ratios = counts
        .into_iter()
        .filter(|(_, c)| *c > 0)
        .map(|(op, c)| (op, c as f64 / total as f64))
        .collect();
    (Some(ratios), total)
}

/// Ranks searched above the distinct-key count when calibrating.
const KEY_SPACE_SEARCH_FACTOR: u64 = 16;
const KEY_SPACE_SEARCH_CAP: u64 = 1 << 22;

/// Key space for which `draws` samples of `access` are expected to touch
/// `distinct` keys.
///
/// A trace only shows the keys it touched, and the tail of the fitted rank
/// distribution spreads over more ranks than that. Sampling it inside exactly
/// `distinct` ranks piles the tail onto fewer keys, so the replay would touch
/// fewer keys, each more often. When no key space in the searched range
/// reaches `distinct`, the smallest one within 0.1% of the best reachable
/// count is used.
pub fn calibrate_key_space(access: &DistributionFamily, distinct: u64, draws: f64) -> u64 {
    let hi = distinct
        .saturating_mul(KEY_SPACE_SEARCH_FACTOR)
        .min(KEY_SPACE_SEARCH_CAP)
        .max(distinct);
    if hi == distinct || draws < 1.0 {
        return distinct;
    }
    // rank r collects samples x with bound[r-1] < x <= bound[r]
    let shift = match access {
        DistributionFamily::Fixed { .. } | DistributionFamily::Normal { .. } | DistributionFamily::Empirical { .. } => 0.5,
        DistributionFamily::Uniform { .. } => 1.0,
        _ => 0.0,
    };
    let bounds: Vec<f64> = (0..=hi).map(|r| r as f64 + shift).collect();
    let cdf = access.cdf_sorted(&bounds);
    let renormalized = matches!(access, DistributionFamily::TwoTermExponential { .. });
    let touched = |p: f64| -(draws * (-p.clamp(0.0, 1.0)).ln_1p()).exp_m1();
    let expected = |k: u64| -> f64 {
        let k = k as usize;
        if renormalized {
            let mass = cdf[k] - cdf[0];
            if mass <= 0.0 {
                return 1.0;
            }
            (1..=k).map(|r| touched((cdf[r] - cdf[r - 1]) / mass)).sum()
        } else {
            let mut sum = touched(cdf[1]);
            sum += (2..k).map(|r| touched(cdf[r] - cdf[r - 1])).sum::<f64>();
            if k >= 2 {
                sum += touched(1.0 - cdf[k - 1]);
            }
            sum
        }
    };
    let goal = (distinct as f64).min(expected(hi) - 0.001 * distinct as f64);
    if expected(distinct) >= goal {
        return distinct;
    }
    let (mut lo, mut hi) = (distinct, hi);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if expected(mid) >= goal {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Rescales a rank-domain family to a key space `factor` times larger.
pub fn stretch_ranks(d: &DistributionFamily, factor: f64) -> DistributionFamily {
    if factor == 1.0 {
        return d.clone();
    }
    match d {
        DistributionFamily::Fixed { value } => DistributionFamily::Fixed { value: value * factor },
        DistributionFamily::Uniform { min, max } => DistributionFamily::Uniform {
            min: *min,
            max: max * factor,
        },
        DistributionFamily::Zipfian { s, n } => DistributionFamily::Zipfian {
            s: *s,
            n: (n * factor).round().max(1.0),
        },
        DistributionFamily::Pareto { shape, scale } => DistributionFamily::Pareto {
            shape: *shape,
            scale: scale * factor,
        },
        DistributionFamily::Exponential { rate } => DistributionFamily::Exponential { rate: rate / factor },
        DistributionFamily::TwoTermExponential { a, b, c, d } => DistributionFamily::TwoTermExponential {
            a: *a,
            b: b / factor,
            c: *c,
            d: d / factor,
        },
        DistributionFamily::Normal { mu, sigma } => DistributionFamily::Normal {
            mu: mu * factor,
            sigma: sigma * factor,
        },
        DistributionFamily::Empirical { values, probs } => DistributionFamily::Empirical {
            values: values.iter().map(|v| v * factor).collect(),
            probs: probs.clone(),
        },
    }
}

/// One generated operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedOp {
    pub op: Op,
    pub key_index: u64,
    pub key: Vec<u8>,
    /// Bytes to write; zero for reads and deletes.
    pub value_len: u64,
    /// Entries to read; zero except for Seek.
    pub scan_len: u32,
}

/// Immutable per-phase generator shared by all client threads; each thread
/// drives it with its own [`RngState`].
#[derive(Debug, Clone)]
pub struct PhaseGenerator {
    cumulative: Vec<(Op, f64)>,
    keys: KeySampler,
    mapper: KeyMapper,
    values: SizeSampler,
    scan_len: u32,
}

impl PhaseGenerator {
    pub fn new(spec: &WorkloadSpec, phase_index: usize) -> Result<Self, WorkloadError> {
        let phase = spec
            .phases
            .get(phase_index)
            .ok_or_else(|| WorkloadError::Invalid(format!("no phase {phase_index}")))?;
        let total: f64 = phase.query_ratios.values().sum();
        if !(total > 0.0) {
            return Err(WorkloadError::Invalid(format!("phase {phase_index} has no operations")));
        }
        let mut acc = 0.0;
        let cumulative = phase
            .query_ratios
            .iter()
            .filter(|(_, r)| **r > 0.0)
            .map(|(op, r)| {
                acc += r / total;
                (*op, acc)
            })
            .collect();
        Ok(PhaseGenerator {
            cumulative,
            keys: KeySampler::new(&phase.access_dist, phase.key_space)?,
            mapper: KeyMapper::new(phase.key_space, &phase.key_size, spec.seed)?,
            values: SizeSampler::new(&phase.value_size, phase.value_size_stddev)?,
            scan_len: phase.scan_length.max(1),
        })
    }

    pub fn mapper(&self) -> &KeyMapper {
        &self.mapper
    }

    pub fn value_sampler(&self) -> &SizeSampler {
        &self.values
    }

    pub fn next_op(&self, rng: &mut RngState) -> GeneratedOp {
        use rand::Rng;
        let u: f64 = rng.random();
        let op = self
            .cumulative
            .iter()
            .find(|(_, c)| u < *c)
            .or(self.cumulative.last())
            .map(|(op, _)| *op)
            .expect("at least one op");
        let key_index = self.keys.sample(rng);
        let key = self.mapper.key_for(key_index);
        let value_len = if op.writes_value() { self.values.sample(rng) } else { 0 };
        GeneratedOp {
            op,
            key_index,
            key,
            value_len,
            scan_len: if op == Op::Seek { self.scan_len } else { 0 },
        }
    }
}
