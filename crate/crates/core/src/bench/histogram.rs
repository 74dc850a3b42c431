//! Log-bucketed latency histograms.
//!
//! Bucket `i` covers `[1.02^i, 1.02^(i+1))` µs, from 1 µs up to 100 s; values
//! below 1 µs land in the first bucket and values beyond 100 s in the last.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BUCKET_RATIO: f64 = 1.02;
pub const MAX_LATENCY_US: f64 = 1e8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HistogramError {
    #[error("percentile of an empty histogram")]
    EmptyHistogram,
    #[error("percentile must be in (0, 100], got {0}")]
    InvalidPercentile(String),
}

pub fn bucket_count() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| (MAX_LATENCY_US.ln() / BUCKET_RATIO.ln()).ceil() as usize)
}

fn bounds() -> &'static [f64] {
    static B: OnceLock<Vec<f64>> = OnceLock::new();
    B.get_or_init(|| (0..=bucket_count()).map(|i| BUCKET_RATIO.powi(i as i32)).collect())
}

pub fn bucket_of(latency_us: f64) -> usize {
    if !(latency_us >= 1.0) {
        return 0;
    }
    let b = bounds();
    let guess = ((latency_us.ln() / BUCKET_RATIO.ln()) as usize).min(bucket_count() - 1);
    // correct for floating error at bucket edges
    let mut i = guess;
    while i > 0 && latency_us < b[i] {
        i -= 1;
    }
    while i + 1 < bucket_count() && latency_us >= b[i + 1] {
        i += 1;
    }
    i
}

/// Upper bound of bucket `i` in µs.
pub fn bucket_upper(i: usize) -> f64 {
    bounds()[i + 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl LatencyHistogram {
    pub fn new() -> Self {
        LatencyHistogram {
            counts: vec![0; bucket_count()],
            total: 0,
        }
    }

    pub fn record(&mut self, latency_us: f64) {
        self.counts[bucket_of(latency_us)] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn clear(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.total = 0;
    }

    /// Smallest bucket upper bound covering at least `p` percent of samples.
    pub fn percentile(&self, p: f64) -> Result<f64, HistogramError> {
        if !(p > 0.0 && p <= 100.0) {
            return Err(HistogramError::InvalidPercentile(p.to_string()));
        }
        if self.total == 0 {
            return Err(HistogramError::EmptyHistogram);
        }
        let need = ((p / 100.0) * self.total as f64).ceil().max(1.0) as u64;
        let mut acc = 0u64;
        for (i, c) in self.counts.iter().enumerate() {
            acc += c;
            if acc >= need {
                return Ok(bucket_upper(i));
            }
        }
        Ok(bucket_upper(bucket_count() - 1))
    }
}

pub fn percentile(hist: &LatencyHistogram, p: f64) -> Result<f64, HistogramError> {
    hist.percentile(p)
}

/// Lock-free histogram for concurrent recorders.
#[derive(Debug)]
pub struct AtomicHistogram {
    counts: Vec<AtomicU64>,
}

impl Default for AtomicHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl AtomicHistogram {
    pub fn new() -> Self {
        AtomicHistogram {
            counts: (0..bucket_count()).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn record(&self, latency_us: f64) {
        self.counts[bucket_of(latency_us)].fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> LatencyHistogram {
        let counts: Vec<u64> = self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect();
        let total = counts.iter().sum();
        LatencyHistogram { counts, total }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_and_range() {
        let n = bucket_count();
        assert!((900..1000).contains(&n), "{n}");
        for v in [1.0, 1.5, 99.9, 100.0, 12345.6, 9.9e7] {
            let i = bucket_of(v);
            assert!(bucket_upper(i) > v && (i == 0 || bucket_upper(i - 1) <= v), "{v}");
        }
        assert_eq!(bucket_of(0.1), 0);
        assert_eq!(bucket_of(1e12), n - 1);
    }

    #[test]
    fn single_sample() {
        let mut h = LatencyHistogram::new();
        h.record(100.0);
        let p = h.percentile(99.0).unwrap();
        assert_eq!(p, bucket_upper(bucket_of(100.0)));
        assert!(p > 100.0 && p <= 102.0);
    }

    #[test]
    fn empty_and_bad_input() {
        let h = LatencyHistogram::new();
        assert_eq!(h.percentile(50.0), Err(HistogramError::EmptyHistogram));
        let mut h = h;
        h.record(3.0);
        assert!(h.percentile(0.0).is_err());
        assert!(h.percentile(100.5).is_err());
        assert!(h.percentile(100.0).is_ok());
    }

    #[test]
    fn atomic_matches_plain() {
        let a = AtomicHistogram::new();
        let mut p = LatencyHistogram::new();
        for i in 1..1000 {
            a.record(i as f64 * 1.7);
            p.record(i as f64 * 1.7);
        }
        assert_eq!(a.snapshot(), p);
    }
}
