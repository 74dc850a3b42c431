use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::stats::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FamilyTag {
    Fixed,
    Uniform,
    Zipfian,
    Pareto,
    Exponential,
    TwoTermExponential,
    Normal,
    Empirical,
}

impl FamilyTag {
    /// Families that compete in [`super::fit_candidates`] by default.
    /// `Empirical` reproduces any sample exactly and is kept as a fallback.
    pub const PARAMETRIC: [FamilyTag; 7] = [
        FamilyTag::Fixed,
        FamilyTag::Uniform,
        FamilyTag::Zipfian,
        FamilyTag::Pareto,
        FamilyTag::Exponential,
        FamilyTag::TwoTermExponential,
        FamilyTag::Normal,
    ];

    pub fn param_count(self) -> usize {
        match self {
            FamilyTag::Fixed | FamilyTag::Exponential => 1,
            FamilyTag::Uniform | FamilyTag::Zipfian | FamilyTag::Pareto | FamilyTag::Normal => 2,
            FamilyTag::TwoTermExponential => 4,
            FamilyTag::Empirical => usize::MAX,
        }
    }

    /// Loose name matching for advisor replies ("gaussian", "two-term exp", ...).
    pub fn from_loose(word: &str) -> Option<FamilyTag> {
        let w: String = word
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let tag = match w.as_str() {
            "fixed" | "constant" => FamilyTag::Fixed,
            "uniform" => FamilyTag::Uniform,
            "zipf" | "zipfian" | "powerlaw" => FamilyTag::Zipfian,
            "pareto" => FamilyTag::Pareto,
            "exponential" | "exp" => FamilyTag::Exponential,
            "twotermexponential" | "twotermexp" | "sumoftwoexponentials" | "doubleexponential" => {
                FamilyTag::TwoTermExponential
            }
            "normal" | "gaussian" => FamilyTag::Normal,
            "empirical" => FamilyTag::Empirical,
            _ => return None,
        };
        Some(tag)
    }
}

/// A distribution family with its parameters.
///
/// `TwoTermExponential` describes the survival function
/// `S(x) = a*e^(b*x) + c*e^(d*x)` on `x >= 0`, the form used for key-access
/// popularity curves. `Zipfian` is defined over integer ranks `1..=n`.
/// `Empirical` holds sorted support points with their probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", deny_unknown_fields)]
pub enum DistributionFamily {
    Fixed { value: f64 },
    Uniform { min: f64, max: f64 },
    Zipfian { s: f64, n: f64 },
    Pareto { shape: f64, scale: f64 },
    Exponential { rate: f64 },
    TwoTermExponential { a: f64, b: f64, c: f64, d: f64 },
    Normal { mu: f64, sigma: f64 },
    Empirical { values: Vec<f64>, probs: Vec<f64> },
}

impl DistributionFamily {
    pub fn tag(&self) -> FamilyTag {
        match self {
            DistributionFamily::Fixed { .. } => FamilyTag::Fixed,
            DistributionFamily::Uniform { .. } => FamilyTag::Uniform,
            DistributionFamily::Zipfian { .. } => FamilyTag::Zipfian,
            DistributionFamily::Pareto { .. } => FamilyTag::Pareto,
            DistributionFamily::Exponential { .. } => FamilyTag::Exponential,
            DistributionFamily::TwoTermExponential { .. } => FamilyTag::TwoTermExponential,
            DistributionFamily::Normal { .. } => FamilyTag::Normal,
            DistributionFamily::Empirical { .. } => FamilyTag::Empirical,
        }
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(&str, f64)> = match self {
            DistributionFamily::Fixed { value } => vec![("value", *value)],
            DistributionFamily::Uniform { min, max } => vec![("min", *min), ("max", *max)],
            DistributionFamily::Zipfian { s, n } => vec![("s", *s), ("n", *n)],
            DistributionFamily::Pareto { shape, scale } => vec![("shape", *shape), ("scale", *scale)],
            DistributionFamily::Exponential { rate } => vec![("rate", *rate)],
            DistributionFamily::TwoTermExponential { a, b, c, d } => {
                vec![("a", *a), ("b", *b), ("c", *c), ("d", *d)]
            }
            DistributionFamily::Normal { mu, sigma } => vec![("mu", *mu), ("sigma", *sigma)],
            DistributionFamily::Empirical { values, .. } => vec![("support", values.len() as f64)],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Builds a family from a tag and a parameter map, as parsed from advisor
    /// text. Returns `None` when a required parameter is missing.
    pub fn from_params(tag: FamilyTag, p: &BTreeMap<String, f64>) -> Option<DistributionFamily> {
        let g = |k: &str| p.get(k).copied();
        let fam = match tag {
            FamilyTag::Fixed => DistributionFamily::Fixed { value: g("value")? },
            FamilyTag::Uniform => DistributionFamily::Uniform { min: g("min")?, max: g("max")? },
            FamilyTag::Zipfian => DistributionFamily::Zipfian { s: g("s")?, n: g("n")? },
            FamilyTag::Pareto => DistributionFamily::Pareto { shape: g("shape")?, scale: g("scale")? },
            FamilyTag::Exponential => DistributionFamily::Exponential { rate: g("rate")? },
            FamilyTag::TwoTermExponential => DistributionFamily::TwoTermExponential {
                a: g("a")?,
                b: g("b")?,
                c: g("c")?,
                d: g("d")?,
            },
            FamilyTag::Normal => DistributionFamily::Normal { mu: g("mu")?, sigma: g("sigma")? },
            FamilyTag::Empirical => return None,
        };
        Some(fam)
    }

    /// Checks parameter completeness and positivity constraints.
    pub fn validate(&self) -> Result<(), String> {
        let finite = self.params().values().all(|v| v.is_finite());
        if !finite {
            return Err(format!("{self}: non-finite parameter"));
        }
        match self {
            DistributionFamily::Uniform { min, max } if max < min => {
                Err(format!("{self}: max below min"))
            }
            DistributionFamily::Zipfian { s, n } if *n < 1.0 || *s < 0.0 => {
                Err(format!("{self}: need n >= 1 and s >= 0"))
            }
            DistributionFamily::Pareto { shape, scale } if *shape <= 0.0 || *scale <= 0.0 => {
                Err(format!("{self}: shape and scale must be positive"))
            }
            DistributionFamily::Exponential { rate } if *rate <= 0.0 => {
                Err(format!("{self}: rate must be positive"))
            }
            DistributionFamily::Normal { sigma, .. } if *sigma <= 0.0 => {
                Err(format!("{self}: sigma must be positive"))
            }
            DistributionFamily::Empirical { values, probs }
                if values.is_empty() || values.len() != probs.len() =>
            {
                Err("empirical: empty or mismatched support".to_string())
            }
            _ => Ok(()),
        }
    }

    /// Mean of the distribution, where it has a closed form.
    pub fn mean(&self) -> Option<f64> {
        match self {
            DistributionFamily::Fixed { value } => Some(*value),
            DistributionFamily::Uniform { min, max } => Some((min + max) / 2.0),
            DistributionFamily::Pareto { shape, scale } if *shape > 1.0 => {
                Some(shape * scale / (shape - 1.0))
            }
            DistributionFamily::Exponential { rate } => Some(1.0 / rate),
            DistributionFamily::Normal { mu, .. } => Some(*mu),
            DistributionFamily::TwoTermExponential { a, b, c, d } if *b < 0.0 && *d < 0.0 => {
                // E[X] = integral of the survival function
                Some(-a / b - c / d)
            }
            DistributionFamily::Empirical { values, probs } => {
                Some(values.iter().zip(probs).map(|(v, p)| v * p).sum())
            }
            _ => None,
        }
    }

    /// CDF evaluated at ascending points.
    pub fn cdf_sorted(&self, xs: &[f64]) -> Vec<f64> {
        match self {
            DistributionFamily::Zipfian { s, n } => {
                let norm = generalized_harmonic(n.floor() as u64, *s);
                let mut acc = HarmonicWalker::new(*s);
                xs.iter()
                    .map(|&x| {
                        if x < 1.0 {
                            0.0
                        } else {
                            let k = x.floor().min(n.floor()) as u64;
                            (acc.advance_to(k) / norm).min(1.0)
                        }
                    })
                    .collect()
            }
            DistributionFamily::Empirical { values, probs } => {
                let mut cum = 0.0;
                let mut idx = 0usize;
                xs.iter()
                    .map(|&x| {
                        while idx < values.len() && values[idx] <= x {
                            cum += probs[idx];
                            idx += 1;
                        }
                        cum.min(1.0)
                    })
                    .collect()
            }
            _ => xs.iter().map(|&x| self.cdf(x)).collect(),
        }
    }

    /// Pointwise CDF. Zipfian and Empirical are linear in the support size;
    /// prefer [`Self::cdf_sorted`] for many points.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            DistributionFamily::Fixed { value } => {
                if x >= *value {
                    1.0
                } else {
                    0.0
                }
            }
            DistributionFamily::Uniform { min, max } => {
                if x < *min {
                    0.0
                } else if x >= *max {
                    1.0
                } else {
                    (x - min) / (max - min)
                }
            }
            DistributionFamily::Pareto { shape, scale } => {
                if x < *scale {
                    0.0
                } else {
                    1.0 - (scale / x).powf(*shape)
                }
            }
            DistributionFamily::Exponential { rate } => {
                if x < 0.0 {
                    0.0
                } else {
                    1.0 - (-rate * x).exp()
                }
            }
            DistributionFamily::Normal { mu, sigma } => normal_cdf(x, *mu, *sigma),
            DistributionFamily::TwoTermExponential { a, b, c, d } => {
                if x < 0.0 {
                    0.0
                } else {
                    (1.0 - (a * (b * x).exp() + c * (d * x).exp())).clamp(0.0, 1.0)
                }
            }
            DistributionFamily::Zipfian { .. } | DistributionFamily::Empirical { .. } => {
                self.cdf_sorted(&[x])[0]
            }
        }
    }
}

impl fmt::Display for DistributionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let DistributionFamily::Empirical { values, .. } = self {
            return write!(f, "Empirical(support={})", values.len());
        }
        write!(f, "{:?}(", self.tag())?;
        for (i, (k, v)) in self.params().iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}={}", fmt_param(*v))?;
        }
        f.write_str(")")
    }
}

fn fmt_param(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.6}")
    }
}

/// Exact summation up to this many terms; beyond it the tail is integrated.
const HARMONIC_EXACT_TERMS: u64 = 1 << 20;

/// `H(k, s) = sum_{i=1..k} i^-s`.
pub fn generalized_harmonic(k: u64, s: f64) -> f64 {
    let mut w = HarmonicWalker::new(s);
    w.advance_to(k)
}

/// Incremental generalized harmonic sums for ascending `k`.
struct HarmonicWalker {
    s: f64,
    k: u64,
    sum: f64,
}

impl HarmonicWalker {
    fn new(s: f64) -> Self {
        HarmonicWalker { s, k: 0, sum: 0.0 }
    }

    fn advance_to(&mut self, k: u64) -> f64 {
        if k <= self.k {
            return self.sum;
        }
        let exact_end = k.min(HARMONIC_EXACT_TERMS);
        while self.k < exact_end {
            self.k += 1;
            self.sum += (self.k as f64).powf(-self.s);
        }
        if k > self.k {
            // midpoint rule: sum_{i=m+1..k} i^-s ~ integral over [m+0.5, k+0.5]
            let lo = self.k as f64 + 0.5;
            let hi = k as f64 + 0.5;
            let tail = if (self.s - 1.0).abs() < 1e-12 {
                (hi / lo).ln()
            } else {
                (hi.powf(1.0 - self.s) - lo.powf(1.0 - self.s)) / (1.0 - self.s)
            };
            self.sum += tail;
            self.k = k;
        }
        self.sum
    }
}
