//! Goodness-of-fit and two-sample similarity statistics.

use serde::{Deserialize, Serialize};

use super::CharacterizeError;

/// Minimum points per side for the two-sample KS test.
pub const KS_MIN_SAMPLES: usize = 20;
const KS_SERIES_TERMS: usize = 100;

/// Coefficient of determination `1 - SS_res / SS_tot`.
///
/// When the observations are constant (`SS_tot == 0`) the result is `1.0` for
/// an exact prediction and `-inf` otherwise.
pub fn r_squared(observed: &[f64], predicted: &[f64]) -> Result<f64, CharacterizeError> {
    if observed.len() != predicted.len() || observed.is_empty() {
        return Err(CharacterizeError::LengthMismatch {
            observed: observed.len(),
            predicted: predicted.len(),
        });
    }
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (o, p) in observed.iter().zip(predicted) {
        ss_res += (o - p) * (o - p);
        ss_tot += (o - mean) * (o - mean);
    }
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY });
    }
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub ks_statistic: f64,
    pub p_value: f64,
    pub sample_sizes: (usize, usize),
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<SimilarityReport, CharacterizeError> {
    for s in [a, b] {
        if s.len() < KS_MIN_SAMPLES {
            return Err(CharacterizeError::TooFewSamples {
                got: s.len(),
                need: KS_MIN_SAMPLES,
            });
        }
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let d = ks_statistic_sorted(&xs, &ys);
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let ne = n * m / (n + m);
    let p = if d == 0.0 {
        1.0
    } else {
        let sq = ne.sqrt();
        kolmogorov_q((sq + 0.12 + 0.11 / sq) * d)
    };
    Ok(SimilarityReport {
        ks_statistic: d,
        p_value: p.clamp(0.0, 1.0),
        sample_sizes: (xs.len(), ys.len()),
    })
}

fn ks_statistic_sorted(xs: &[f64], ys: &[f64]) -> f64 {
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = if xs[i] <= ys[j] { xs[i] } else { ys[j] };
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Kolmogorov survival function `Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2)`.
///
/// The alternating series is useless for small arguments, where the
/// theta-function form of the CDF converges in a handful of terms instead.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.3 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut cdf = 0.0;
        for k in 1..=KS_SERIES_TERMS {
            let odd = (2 * k - 1) as f64;
            let term = (-odd * odd * pi2 / (8.0 * lambda * lambda)).exp();
            cdf += term;
            if term == 0.0 {
                break;
            }
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=KS_SERIES_TERMS {
        let kf = k as f64;
        sum += sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `points` evenly spaced quantiles (midpoint convention) of a sample.
pub fn quantile_profile(samples: &[f64], points: usize) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return Vec::new();
    }
    let n = sorted.len();
    (0..points)
        .map(|k| {
            let q = (k as f64 + 0.5) / points as f64;
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] * (1.0 - frac) + sorted[hi] * frac
        })
        .collect()
}

/// Default number of quantile points used by [`profile_similarity`].
pub const PROFILE_POINTS: usize = 100;

/// KS comparison of two large samples through their quantile profiles.
///
/// A raw two-sample test on hundreds of thousands of points rejects any
/// model discrepancy, however small, and its p-value is uniform under the
/// null. Comparing `points`-quantile profiles measures whether the two
/// distributions have the same shape at a fixed resolution.
pub fn profile_similarity(
    a: &[f64],
    b: &[f64],
    points: usize,
) -> Result<SimilarityReport, CharacterizeError> {
    for s in [a, b] {
        if s.len() < KS_MIN_SAMPLES {
            return Err(CharacterizeError::TooFewSamples {
                got: s.len(),
                need: KS_MIN_SAMPLES,
            });
        }
    }
    ks_two_sample(&quantile_profile(a, points), &quantile_profile(b, points))
}

/// Error function, Abramowitz-Stegun style rational approximation of erfc
/// (Numerical Recipes `erfcc`), fractional error below 1.2e-7.
pub fn erf(x: f64) -> f64 {
    1.0 - erfc(x)
}

pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

pub fn normal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    0.5 * erfc(-(x - mu) / (sigma * std::f64::consts::SQRT_2))
}
