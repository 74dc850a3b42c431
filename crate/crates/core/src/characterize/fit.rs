//! Candidate-family fitting scored by R² against the empirical CDF.

use serde::{Deserialize, Serialize};

use super::family::{DistributionFamily, FamilyTag};
use super::stats::r_squared;
use super::CharacterizeError;

pub const MIN_FIT_SAMPLES: usize = 10;

/// Fits whose R² differ by at most this much are treated as tied, and the
/// family with fewer parameters wins. Nested families (an exponential is a
/// two-term exponential with one term switched off) otherwise win on noise.
pub const R2_TIE_TOLERANCE: f64 = 1e-3;

const MAX_GRID_POINTS: usize = 1024;
const TTE_STARTS: usize = 8;
const ZIPF_MAX_S: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionFit {
    pub family: DistributionFamily,
    pub r_squared: f64,
    pub sample_count: usize,
}

/// Points at which model CDFs are compared to the empirical CDF.
#[derive(Debug, Clone)]
pub struct EcdfGrid {
    pub xs: Vec<f64>,
    pub ecdf: Vec<f64>,
}

impl EcdfGrid {
    pub fn from_sorted(sorted: &[f64]) -> EcdfGrid {
        let n = sorted.len();
        let mut runs: Vec<(f64, usize)> = Vec::new();
        for (i, v) in sorted.iter().enumerate() {
            match runs.last_mut() {
                Some((last, end)) if *last == *v => *end = i + 1,
                _ => runs.push((*v, i + 1)),
            }
        }
        let pick: Vec<(f64, usize)> = if runs.len() <= MAX_GRID_POINTS {
            runs
        } else {
            let mut out: Vec<(f64, usize)> = Vec::with_capacity(MAX_GRID_POINTS);
            for k in 0..MAX_GRID_POINTS {
                let idx = k * (n - 1) / (MAX_GRID_POINTS - 1);
                let v = sorted[idx];
                if out.last().map(|(x, _)| *x == v).unwrap_or(false) {
                    continue;
                }
                let end = sorted.partition_point(|s| *s <= v);
                out.push((v, end));
            }
            out
        };
        EcdfGrid {
            xs: pick.iter().map(|(x, _)| *x).collect(),
            ecdf: pick.iter().map(|(_, c)| *c as f64 / n as f64).collect(),
        }
    }

    pub fn score(&self, family: &DistributionFamily) -> f64 {
        let predicted = family.cdf_sorted(&self.xs);
        if predicted.iter().any(|p| !p.is_finite()) {
            return f64::NEG_INFINITY;
        }
        r_squared(&self.ecdf, &predicted).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Fits every candidate and returns the best by R², with near-ties going to
/// the family with fewer parameters.
pub fn fit_candidates(samples: &[f64], candidates: &[FamilyTag]) -> Result<DistributionFit, CharacterizeError> {
    let fits = evaluate_candidates(samples, candidates)?;
    fits.into_iter().next().ok_or(CharacterizeError::FitFailure)
}

/// All successful candidate fits, best first.
pub fn evaluate_candidates(
    samples: &[f64],
    candidates: &[FamilyTag],
) -> Result<Vec<DistributionFit>, CharacterizeError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(CharacterizeError::TooFewSamples {
            got: samples.len(),
            need: MIN_FIT_SAMPLES,
        });
    }
    if candidates.is_empty() {
        return Err(CharacterizeError::NoCandidates);
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(CharacterizeError::NonFiniteSample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let grid = EcdfGrid::from_sorted(&sorted);
    let mut fits: Vec<DistributionFit> = candidates
        .iter()
        .filter_map(|tag| fit_family(*tag, &sorted, &grid))
        .filter(|fam| fam.validate().is_ok())
        .map(|family| DistributionFit {
            r_squared: grid.score(&family),
            family,
            sample_count: samples.len(),
        })
        .filter(|f| !f.r_squared.is_nan())
        .collect();
    if fits.is_empty() {
        return Err(CharacterizeError::FitFailure);
    }
    rank_fits(&mut fits);
    Ok(fits)
}

/// Orders fits best first: highest R², except that fits within
/// [`R2_TIE_TOLERANCE`] of the best are ordered by parameter count.
pub fn rank_fits(fits: &mut [DistributionFit]) {
    fits.sort_by(|a, b| b.r_squared.total_cmp(&a.r_squared));
    let Some(best) = fits.first().map(|f| f.r_squared) else {
        return;
    };
    let tied = fits
        .iter()
        .take_while(|f| f.r_squared >= best - R2_TIE_TOLERANCE)
        .count();
    fits[..tied].sort_by(|a, b| {
        a.family
            .tag()
            .param_count()
            .cmp(&b.family.tag().param_count())
            .then(b.r_squared.total_cmp(&a.r_squared))
    });
}

/// Estimates parameters for one family. `sorted` must be ascending.
pub fn fit_family(tag: FamilyTag, sorted: &[f64], grid: &EcdfGrid) -> Option<DistributionFamily> {
    let n = sorted.len() as f64;
    let min = *sorted.first()?;
    let max = *sorted.last()?;
    let mean = sorted.iter().sum::<f64>() / n;
    match tag {
        FamilyTag::Fixed => Some(DistributionFamily::Fixed { value: mode(sorted) }),
        FamilyTag::Uniform => Some(DistributionFamily::Uniform { min, max }),
        FamilyTag::Normal => {
            let var = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (var > 0.0).then(|| DistributionFamily::Normal { mu: mean, sigma: var.sqrt() })
        }
        FamilyTag::Exponential => (mean > 0.0 && min >= 0.0).then(|| DistributionFamily::Exponential { rate: 1.0 / mean }),
        FamilyTag::Pareto => {
            if min <= 0.0 {
                return None;
            }
            let log_sum: f64 = sorted.iter().map(|x| (x / min).ln()).sum();
            (log_sum > 0.0).then(|| DistributionFamily::Pareto { shape: n / log_sum, scale: min })
        }
        FamilyTag::Zipfian => fit_zipf(sorted),
        FamilyTag::TwoTermExponential => fit_two_term(grid, mean, min),
        FamilyTag::Empirical => Some(empirical_from_sorted(sorted)),
    }
}

/// Most frequent value, ties toward the smaller one.
fn mode(sorted: &[f64]) -> f64 {
    let mut best = (sorted[0], 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == v {
            j += 1;
        }
        if j - i > best.1 {
            best = (v, j - i);
        }
        i = j;
    }
    best.0
}

pub fn empirical_from_sorted(sorted: &[f64]) -> DistributionFamily {
    let n = sorted.len() as f64;
    let mut values: Vec<f64> = Vec::new();
    let mut probs: Vec<f64> = Vec::new();
    for v in sorted {
        if values.last() == Some(v) {
            *probs.last_mut().unwrap() += 1.0 / n;
        } else {
            values.push(*v);
            probs.push(1.0 / n);
        }
    }
    DistributionFamily::Empirical { values, probs }
}

/// Maximum-likelihood exponent for samples read as integer ranks; `n` is the
/// largest observed rank. The likelihood equation
/// `E_s[ln X] = mean(ln x)` is monotone in `s` and solved by bisection.
fn fit_zipf(sorted: &[f64]) -> Option<DistributionFamily> {
    let mut log_sum = 0.0;
    let mut distinct = 0usize;
    let mut prev = f64::NAN;
    for v in sorted {
        let r = v.round();
        if r < 1.0 {
            return None;
        }
        if r != prev {
            distinct += 1;
            prev = r;
        }
        log_sum += r.ln();
    }
    if distinct < 2 {
        return None;
    }
    let n = sorted.last()?.round();
    let target = log_sum / sorted.len() as f64;
    let logs: Vec<f64> = (1..=n as u64).map(|k| (k as f64).ln()).collect();
    let mean_log = |s: f64| {
        let (mut w, mut wl) = (0.0, 0.0);
        for l in &logs {
            let p = (-s * l).exp();
            w += p;
            wl += p * l;
        }
        wl / w
    };
    let (mut lo, mut hi) = (0.0, ZIPF_MAX_S);
    if mean_log(lo) <= target {
        return Some(DistributionFamily::Zipfian { s: 0.0, n });
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mean_log(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(DistributionFamily::Zipfian { s: 0.5 * (lo + hi), n })
}

/// Multi-start Levenberg-Marquardt fit of `S(x) = a e^(bx) + c e^(dx)` to the
/// empirical survival function. Abscissae are scaled by the sample mean for
/// conditioning.
fn fit_two_term(grid: &EcdfGrid, mean: f64, min: f64) -> Option<DistributionFamily> {
    if mean <= 0.0 || min < 0.0 || grid.xs.len() < 4 {
        return None;
    }
    let xs: Vec<f64> = grid.xs.iter().map(|x| x / mean).collect();
    let ys: Vec<f64> = grid.ecdf.iter().map(|f| 1.0 - f).collect();
    // (fast rate, slow rate, fast weight) in mean-normalized units
    const STARTS: [(f64, f64, f64); TTE_STARTS] = [
        (3.0, 0.5, 0.5),
        (10.0, 0.3, 0.7),
        (2.0, 0.8, 0.5),
        (30.0, 0.5, 0.3),
        (5.0, 0.1, 0.8),
        (1.5, 0.2, 0.6),
        (20.0, 2.0, 0.5),
        (8.0, 0.05, 0.9),
    ];
    let mut best: Option<([f64; 4], f64)> = None;
    for (fast, slow, w) in STARTS {
        let start = [w, -fast, 1.0 - w, -slow];
        if let Some((p, sse)) = levenberg_marquardt(&xs, &ys, start) {
            if best.map(|(_, b)| sse < b).unwrap_or(true) {
                best = Some((p, sse));
            }
        }
    }
    let ([mut a, mut b, mut c, mut d], _) = best?;
    if b > d {
        std::mem::swap(&mut a, &mut c);
        std::mem::swap(&mut b, &mut d);
    }
    Some(DistributionFamily::TwoTermExponential { a, b: b / mean, c, d: d / mean })
}

fn tte_eval(p: &[f64; 4], x: f64) -> f64 {
    p[0] * (p[1] * x).exp() + p[2] * (p[3] * x).exp()
}

fn sse(xs: &[f64], ys: &[f64], p: &[f64; 4]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = tte_eval(p, *x) - y;
            r * r
        })
        .sum()
}

fn levenberg_marquardt(xs: &[f64], ys: &[f64], start: [f64; 4]) -> Option<([f64; 4], f64)> {
    const MAX_ITERS: usize = 400;
    // exponents beyond this overflow on the normalized grid
    const MAX_EXPONENT: f64 = 60.0;
    let x_max = xs.iter().copied().fold(0.0, f64::max);
    let mut p = start;
    let mut cost = sse(xs, ys, &p);
    let mut lambda = 1e-3;
    let mut stalled = 0;
    for _ in 0..MAX_ITERS {
        let mut jtj = [[0.0f64; 4]; 4];
        let mut jtr = [0.0f64; 4];
        for (x, y) in xs.iter().zip(ys) {
            let e1 = (p[1] * x).exp();
            let e2 = (p[3] * x).exp();
            let jac = [e1, p[0] * x * e1, e2, p[2] * x * e2];
            let r = p[0] * e1 + p[2] * e2 - y;
            for i in 0..4 {
                jtr[i] += jac[i] * r;
                for j in 0..4 {
                    jtj[i][j] += jac[i] * jac[j];
                }
            }
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut m = jtj;
            for (i, row) in m.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(1e-12);
            }
            let rhs = jtr.map(|v| -v);
            let Some(step) = solve4(m, rhs) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [p[0] + step[0], p[1] + step[1], p[2] + step[2], p[3] + step[3]];
            if cand[1] * x_max > MAX_EXPONENT || cand[3] * x_max > MAX_EXPONENT {
                lambda *= 10.0;
                continue;
            }
            let c = sse(xs, ys, &cand);
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                p = cand;
                cost = c;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                stalled = if rel < 1e-12 { stalled + 1 } else { 0 };
                break;
            }
            lambda *= 4.0;
        }
        if !improved || stalled >= 3 || cost < 1e-300 {
            break;
        }
    }
    (p.iter().all(|v| v.is_finite()) && cost.is_finite()).then_some((p, cost))
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut m: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_samples_are_fixed() {
        let fit = fit_candidates(&[48.0; 1000], &FamilyTag::PARAMETRIC).unwrap();
        assert_eq!(fit.family, DistributionFamily::Fixed { value: 48.0 });
        assert_eq!(fit.r_squared, 1.0);
        assert_eq!(fit.sample_count, 1000);
    }

    #[test]
    fn degenerate_uniform_is_fixed() {
        let fit = fit_candidates(&[1.0; 50], &[FamilyTag::Uniform, FamilyTag::Fixed]).unwrap();
        assert_eq!(fit.family.tag(), FamilyTag::Fixed);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            fit_candidates(&[1.0; 9], &FamilyTag::PARAMETRIC),
            Err(CharacterizeError::TooFewSamples { got: 9, need: 10 })
        ));
    }

    #[test]
    fn no_candidates() {
        assert!(matches!(fit_candidates(&[1.0; 20], &[]), Err(CharacterizeError::NoCandidates)));
    }

    #[test]
    fn inapplicable_candidates_fail() {
        // Pareto needs positive support, Normal needs spread
        let r = fit_candidates(&[-1.0; 20], &[FamilyTag::Pareto, FamilyTag::Normal]);
        assert!(matches!(r, Err(CharacterizeError::FitFailure)));
    }

    #[test]
    fn mode_prefers_smaller_on_tie() {
        assert_eq!(mode(&[1.0, 1.0, 2.0, 2.0, 3.0]), 1.0);
    }

    #[test]
    fn solve4_identity() {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 2.0;
        }
        assert_eq!(solve4(m, [2.0, 4.0, 6.0, 8.0]).unwrap(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zipf_exponent_is_the_likelihood_root() {
        // ranks 1 and 2 seen 3:1; with n = 2 the root solves 2^-s = 1/3
        let xs = [1.0, 1.0, 1.0, 2.0];
        let Some(DistributionFamily::Zipfian { s, n }) = fit_zipf(&xs) else { panic!() };
        assert_eq!(n, 2.0);
        assert!((s - 3f64.ln() / 2f64.ln()).abs() < 1e-9, "{s}");
    }

    #[test]
    fn zipf_flat_sample_gives_zero_exponent() {
        let xs = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let Some(DistributionFamily::Zipfian { s, .. }) = fit_zipf(&xs) else { panic!() };
        assert!(s < 1e-9, "{s}");
    }

    #[test]
    fn lm_recovers_noise_free_curve() {
        let truth = [0.6, -4.0, 0.4, -0.5];
        let xs: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let ys: Vec<f64> = xs.iter().map(|x| tte_eval(&truth, *x)).collect();
        let (p, cost) = levenberg_marquardt(&xs, &ys, [0.5, -3.0, 0.5, -0.3]).unwrap();
        assert!(cost < 1e-12, "cost {cost}");
        for (a, b) in p.iter().zip(truth) {
            assert!((a - b).abs() < 1e-4, "{p:?}");
        }
    }

    #[test]
    fn ranking_prefers_fewer_params_within_tolerance() {
        let mut fits = vec![
            DistributionFit {
                family: DistributionFamily::TwoTermExponential { a: 1.0, b: -1.0, c: 0.0, d: -2.0 },
                r_squared: 0.9999,
                sample_count: 10,
            },
            DistributionFit {
                family: DistributionFamily::Exponential { rate: 1.0 },
                r_squared: 0.9995,
                sample_count: 10,
            },
            DistributionFit {
                family: DistributionFamily::Fixed { value: 1.0 },
                r_squared: 0.5,
                sample_count: 10,
            },
        ];
        rank_fits(&mut fits);
        assert_eq!(fits[0].family.tag(), FamilyTag::Exponential);
        assert_eq!(fits[1].family.tag(), FamilyTag::TwoTermExponential);
    }
}
