//! Deterministic random streams and per-family samplers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Pareto, Zipf};

use super::WorkloadError;
use crate::characterize::DistributionFamily;

/// Knots in the tabulated inverse CDF used for families without a closed-form
/// inverse.
pub const INVERSE_TABLE_KNOTS: usize = 4096;
/// Sizes are capped so a heavy tail cannot allocate unbounded values.
pub const MAX_SAMPLED_SIZE: u64 = 64 << 20;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random stream derived from `(seed, thread, phase)`.
#[derive(Debug, Clone)]
pub struct RngState(ChaCha8Rng);

impl RngState {
    pub fn derive(seed: u64, thread: u64, phase: u64) -> Self {
        let s = splitmix64(seed ^ splitmix64(thread ^ splitmix64(phase.wrapping_add(0x5eed))));
        RngState(ChaCha8Rng::seed_from_u64(s))
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Piecewise-linear inverse of a CDF tabulated on `[lo, hi]`, renormalized so
/// the table covers the whole unit interval.
#[derive(Debug, Clone)]
pub struct InverseTable {
    xs: Vec<f64>,
    cdf: Vec<f64>,
}

impl InverseTable {
    pub fn new(dist: &DistributionFamily, lo: f64, hi: f64) -> Option<Self> {
        if !(hi > lo) {
            return None;
        }
        let xs: Vec<f64> = (0..INVERSE_TABLE_KNOTS)
            .map(|i| lo + (hi - lo) * i as f64 / (INVERSE_TABLE_KNOTS - 1) as f64)
            .collect();
        let mut cdf = dist.cdf_sorted(&xs);
        // enforce monotonicity against rounding, then renormalize
        for i in 1..cdf.len() {
            if cdf[i] < cdf[i - 1] {
                cdf[i] = cdf[i - 1];
            }
        }
        let (c0, c1) = (cdf[0], cdf[cdf.len() - 1]);
        if !(c1 - c0 > 0.0) {
            return None;
        }
        for c in &mut cdf {
            *c = (*c - c0) / (c1 - c0);
        }
        Some(InverseTable { xs, cdf })
    }

    pub fn invert(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u);
        if i == 0 {
            return self.xs[0];
        }
        if i >= self.cdf.len() {
            return self.xs[self.xs.len() - 1];
        }
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.xs[i - 1] + t * (self.xs[i] - self.xs[i - 1])
    }
}

/// Upper end of the tabulated domain for a two-term exponential: where the
/// slower term has decayed to 1e-9 of its weight.
fn tte_extent(b: f64, d: f64) -> Option<f64> {
    let slow = b.max(d);
    (slow < 0.0).then(|| (1e9f64).ln() / -slow)
}

#[derive(Debug, Clone)]
enum Continuous {
    Fixed(f64),
    Uniform(f64, f64),
    Normal(Normal<f64>),
    Pareto(Pareto<f64>),
    Exp(Exp<f64>),
    Zipf(Zipf<f64>),
    Table(InverseTable),
    Empirical { values: Vec<f64>, cum: Vec<f64> },
}

impl Continuous {
    fn new(dist: &DistributionFamily, extent: Option<f64>) -> Result<Self, WorkloadError> {
        dist.validate().map_err(WorkloadError::UnsupportedFamily)?;
        let unsupported = |why: &str| WorkloadError::UnsupportedFamily(format!("{dist}: {why}"));
        Ok(match dist {
            DistributionFamily::Fixed { value } => Continuous::Fixed(*value),
            DistributionFamily::Uniform { min, max } => Continuous::Uniform(*min, *max),
            DistributionFamily::Normal { mu, sigma } => {
                Continuous::Normal(Normal::new(*mu, *sigma).map_err(|e| unsupported(&e.to_string()))?)
            }
            DistributionFamily::Pareto { shape, scale } => {
                Continuous::Pareto(Pareto::new(*scale, *shape).map_err(|e| unsupported(&e.to_string()))?)
            }
            DistributionFamily::Exponential { rate } => {
                Continuous::Exp(Exp::new(*rate).map_err(|e| unsupported(&e.to_string()))?)
            }
            DistributionFamily::Zipfian { s, n } => {
                let n = extent.map_or(n.floor(), |e| n.floor().min(e)).max(1.0);
                Continuous::Zipf(Zipf::new(n, *s).map_err(|e| unsupported(&e.to_string()))?)
            }
            DistributionFamily::TwoTermExponential { b, d, .. } => {
                let hi = match extent {
                    Some(e) => e,
                    None => tte_extent(*b, *d).ok_or_else(|| unsupported("non-decaying term"))?,
                };
                Continuous::Table(
                    InverseTable::new(dist, 0.0, hi).ok_or_else(|| unsupported("no mass on domain"))?,
                )
            }
            DistributionFamily::Empirical { values, probs } => {
                let total: f64 = probs.iter().sum();
                if !(total > 0.0) || probs.iter().any(|p| *p < 0.0) {
                    return Err(unsupported("probabilities must be non-negative with positive sum"));
                }
                let mut acc = 0.0;
                let cum = probs
                    .iter()
                    .map(|p| {
                        acc += p / total;
                        acc
                    })
                    .collect();
                Continuous::Empirical {
                    values: values.clone(),
                    cum,
                }
            }
        })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Continuous::Fixed(v) => *v,
            Continuous::Uniform(lo, hi) => {
                if hi > lo {
                    rng.random_range(*lo..*hi)
                } else {
                    *lo
                }
            }
            Continuous::Normal(d) => d.sample(rng),
            Continuous::Pareto(d) => d.sample(rng),
            Continuous::Exp(d) => d.sample(rng),
            Continuous::Zipf(d) => d.sample(rng),
            Continuous::Table(t) => t.invert(rng.random::<f64>()),
            Continuous::Empirical { values, cum } => {
                let u: f64 = rng.random();
                let i = cum.partition_point(|&c| c <= u).min(values.len() - 1);
                values[i]
            }
        }
    }
}

/// Samples byte sizes ≥ 1 from a size family.
#[derive(Debug, Clone)]
pub struct SizeSampler {
    inner: Continuous,
    jitter: Option<Normal<f64>>,
}

impl SizeSampler {
    /// `stddev` adds Gaussian jitter to `Fixed` sizes and is ignored by other
    /// families, which carry their own spread.
    pub fn new(dist: &DistributionFamily, stddev: f64) -> Result<Self, WorkloadError> {
        let jitter = match dist {
            DistributionFamily::Fixed { .. } if stddev > 0.0 && stddev.is_finite() => {
                Some(Normal::new(0.0, stddev).map_err(|e| WorkloadError::UnsupportedFamily(e.to_string()))?)
            }
            _ => None,
        };
        Ok(SizeSampler {
            inner: Continuous::new(dist, None)?,
            jitter,
        })
    }

    /// Constant size when the family is `Fixed` without jitter.
    pub fn constant(&self) -> Option<u64> {
        match (&self.inner, &self.jitter) {
            (Continuous::Fixed(v), None) => Some(round_size(*v)),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let mut x = self.inner.sample(rng);
        if let Some(j) = &self.jitter {
            x += j.sample(rng);
        }
        round_size(x)
    }
}

fn round_size(x: f64) -> u64 {
    if x.is_nan() {
        return 1;
    }
    (x.round().max(1.0) as u64).min(MAX_SAMPLED_SIZE)
}

/// Samples popularity ranks and turns them into key indices.
///
/// Families describe the rank (1-based) of the accessed key. Continuous
/// families are discretized with `ceil`, except `Uniform`, which is discrete
/// uniform over the integer ranks it spans. Ranks are clamped into
/// `1..=key_space` and the index is `rank - 1`; [`KeyMapper`] then scrambles it.
#[derive(Debug, Clone)]
pub struct KeySampler {
    inner: Continuous,
    key_space: u64,
}

impl KeySampler {
    pub fn new(dist: &DistributionFamily, key_space: u64) -> Result<Self, WorkloadError> {
        if key_space == 0 {
            return Err(WorkloadError::UnsupportedFamily("key_space must be at least 1".into()));
        }
        let inner = match dist {
            DistributionFamily::Uniform { min, max } => {
                let lo = min.ceil().max(1.0);
                let hi = (max.floor() + 1.0).max(lo + 1.0);
                Continuous::Uniform(lo, hi)
            }
            _ => Continuous::new(dist, Some(key_space as f64))?,
        };
        Ok(KeySampler { inner, key_space })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let x = self.inner.sample(rng);
        let rank = match self.inner {
            Continuous::Uniform(..) | Continuous::Zipf(_) => x.floor(),
            Continuous::Fixed(_) | Continuous::Normal(_) | Continuous::Empirical { .. } => x.round(),
            _ => x.ceil(),
        };
        let rank = if rank.is_nan() { 1.0 } else { rank.clamp(1.0, self.key_space as f64) };
        rank as u64 - 1
    }
}

/// One-off key index draw; prefer a reused [`KeySampler`] in loops.
pub fn sample_key_index(
    dist: &DistributionFamily,
    key_space: u64,
    rng: &mut RngState,
) -> Result<u64, WorkloadError> {
    Ok(KeySampler::new(dist, key_space)?.sample(rng))
}

/// One-off size draw; prefer a reused [`SizeSampler`] in loops.
pub fn sample_size(
    dist: &DistributionFamily,
    stddev: f64,
    rng: &mut RngState,
) -> Result<u64, WorkloadError> {
    Ok(SizeSampler::new(dist, stddev)?.sample(rng))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Maps key indices to key bytes through a seeded bijection of the key space,
/// so popular ranks are spread across the key range rather than clustered.
///
/// The key is the permuted index in decimal, zero-padded to the key size. A
/// key's size is drawn once per index from a stream seeded by the index, so a
/// given index always yields the same bytes. Sizes too small for the index's
/// digits yield the bare digits.
#[derive(Debug, Clone)]
pub struct KeyMapper {
    n: u64,
    a: u64,
    b: u64,
    seed: u64,
    sizes: SizeSampler,
}

impl KeyMapper {
    pub fn new(key_space: u64, key_size: &DistributionFamily, seed: u64) -> Result<Self, WorkloadError> {
        let n = key_space.max(1);
        let mut a = (splitmix64(seed ^ 0xa11ce) % n) | 1;
        while gcd(a, n) != 1 {
            a = (a + 1) % n.max(2);
        }
        let b = splitmix64(seed ^ 0xb0b) % n;
        Ok(KeyMapper {
            n,
            a,
            b,
            seed,
            sizes: SizeSampler::new(key_size, 0.0)?,
        })
    }

    pub fn permute(&self, index: u64) -> u64 {
        ((self.a as u128 * (index % self.n) as u128 + self.b as u128) % self.n as u128) as u64
    }

    pub fn key_for(&self, index: u64) -> Vec<u8> {
        let p = self.permute(index);
        let width = match self.sizes.constant() {
            Some(w) => w,
            None => self.sizes.sample(&mut RngState::derive(self.seed, p, u64::MAX)),
        } as usize;
        format!("{p:0width$}").into_bytes()
    }
}
